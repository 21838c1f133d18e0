//! Binary policy checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [8]  magic "SLOTPOL" + version byte
//! u8   mode (0 think, 1 no-think)
//! u8   role (0 new, 1 old snapshot, 2 reference)
//! u32  think slots, think vocab, structures, answers, feature dim
//! f64  every weight, slot by slot, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::policy::{Mode, PolicyParams, ResponseSchema, Role};

pub const MAGIC: [u8; 8] = *b"SLOTPOL\x01";

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let s = &params.schema;
    let mut out = Vec::with_capacity(30 + 8 * params.num_params());
    out.extend_from_slice(&MAGIC);
    out.push(match s.mode {
        Mode::Think => 0,
        Mode::NoThink => 1,
    });
    out.push(match params.role {
        Role::New => 0,
        Role::OldSnapshot => 1,
        Role::Reference => 2,
    });
    for v in [
        s.num_think_slots,
        s.think_vocab_size,
        s.num_structures,
        s.num_answers,
        params.feature_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for w in &params.weights {
        for v in w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<PolicyParams> {
    let fail = |reason: &str| Error::Checkpoint {
        path: source.to_path_buf(),
        reason: reason.to_string(),
    };
    let truncated = || fail("truncated");
    let mut r = Reader { bytes };
    if r.take(8).ok_or_else(truncated)? != MAGIC {
        return Err(fail("bad magic or unsupported version"));
    }
    let mode = match r.u8().ok_or_else(truncated)? {
        0 => Mode::Think,
        1 => Mode::NoThink,
        _ => return Err(fail("unknown mode")),
    };
    let role = match r.u8().ok_or_else(truncated)? {
        0 => Role::New,
        1 => Role::OldSnapshot,
        2 => Role::Reference,
        _ => return Err(fail("unknown role")),
    };
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32().ok_or_else(truncated)?;
    }
    let [num_think_slots, think_vocab_size, num_structures, num_answers, feature_dim] = dims;
    let schema = ResponseSchema {
        mode,
        num_think_slots,
        think_vocab_size,
        num_structures,
        num_answers,
    };
    schema.validate()?;
    let weights = schema
        .slots()
        .map(|slot| {
            let rows = schema.slot_size(slot);
            let cols = feature_dim + 1;
            let data = (0..rows * cols)
                .map(|_| r.f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(truncated)?;
            Ok(Array2::from_shape_vec((rows, cols), data).expect("sized"))
        })
        .collect::<Result<Vec<_>>>()?;
    if !r.bytes.is_empty() {
        return Err(fail("trailing bytes"));
    }
    Ok(PolicyParams {
        schema,
        feature_dim,
        role,
        weights,
    })
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
