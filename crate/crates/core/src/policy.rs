//! Linear-softmax slot policy.
//!
//! A response is a fixed sequence of categorical slots: one structure slot
//! (which output template is used), `k` think-token slots and one answer
//! slot. Each slot has its own weight matrix over the item features plus a
//! constant bias input, and slots are conditionally independent given the
//! item, so sequence log-probabilities and their gradients are exact.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::task::{VqaItem, LETTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Think,
    NoThink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    New,
    OldSnapshot,
    Reference,
}

/// Output templates indexed by structure choice. Index 0 is the well-formed
/// one; `{T}` expands to the think tokens each followed by a space.
const THINK_TEMPLATES: [&str; 7] = [
    "<think> {T}</think> <answer> {L} </answer>",
    "<think> {T}</think> <answer> {L}",
    "<answer> {L} </answer> <think> {T}</think>",
    "{L}",
    "<think> {T}<answer> {L} </answer>",
    "<answer> {L} </answer>",
    "<think> {T}</think> <answer> {L} </answer> <answer> {L} </answer>",
];

const NO_THINK_TEMPLATES: [&str; 7] = [
    "<answer> {L} </answer>",
    "<answer> {L}",
    "{L} </answer>",
    "{L}",
    "<answer> {L} </answer> <answer> {L} </answer>",
    "The answer is <answer> {L} </answer>",
    "<think> </think> <answer> {L} </answer>",
];

pub const MAX_STRUCTURES: usize = THINK_TEMPLATES.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub mode: Mode,
    pub num_think_slots: usize,
    pub think_vocab_size: usize,
    pub num_structures: usize,
    pub num_answers: usize,
}

impl ResponseSchema {
    pub fn new(mode: Mode, num_think_slots: usize, num_answers: usize) -> Self {
        ResponseSchema {
            mode,
            num_think_slots: if mode == Mode::NoThink { 0 } else { num_think_slots },
            think_vocab_size: 8,
            num_structures: 4,
            num_answers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::NoThink && self.num_think_slots != 0 {
            return Err(Error::invalid("think_slots", "must be 0 in no-think mode"));
        }
        if !(2..=MAX_STRUCTURES).contains(&self.num_structures) {
            return Err(Error::invalid(
                "structures",
                format!("{} is outside 2..={MAX_STRUCTURES}", self.num_structures),
            ));
        }
        if self.think_vocab_size == 0 {
            return Err(Error::invalid("think_vocab", "must be positive"));
        }
        if !(2..=LETTERS.len()).contains(&self.num_answers) {
            return Err(Error::invalid(
                "options",
                format!("{} answer letters is outside 2..=4", self.num_answers),
            ));
        }
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.num_think_slots + 2
    }

    pub fn slot_size(&self, slot: Slot) -> usize {
        match slot {
            Slot::Structure => self.num_structures,
            Slot::Think(_) => self.think_vocab_size,
            Slot::Answer => self.num_answers,
        }
    }

    /// Slots in storage order.
    pub fn slots(&self) -> impl Iterator<Item = Slot> {
        std::iter::once(Slot::Structure)
            .chain((0..self.num_think_slots).map(Slot::Think))
            .chain(std::iter::once(Slot::Answer))
    }

    fn slot_index(&self, slot: Slot) -> Result<usize> {
        match slot {
            Slot::Structure => Ok(0),
            Slot::Think(t) if t < self.num_think_slots => Ok(1 + t),
            Slot::Think(t) => Err(Error::invalid(
                "slot",
                format!("think slot {t} of {}", self.num_think_slots),
            )),
            Slot::Answer => Ok(self.num_think_slots + 1),
        }
    }

    pub fn letter(&self, answer: usize) -> char {
        LETTERS[answer]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Structure,
    Think(usize),
    Answer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub structure: usize,
    pub think: Vec<usize>,
    pub answer: usize,
    pub text: String,
    /// Log-probability under the policy that produced it.
    pub logp_old: f64,
}

impl Response {
    pub fn choice(&self, slot: Slot) -> usize {
        match slot {
            Slot::Structure => self.structure,
            Slot::Think(t) => self.think[t],
            Slot::Answer => self.answer,
        }
    }

    /// Builds a response from slot choices, rendering its text. `logp_old` is 0.
    pub fn from_choices(
        schema: &ResponseSchema,
        structure: usize,
        think: Vec<usize>,
        answer: usize,
    ) -> Response {
        let mut r = Response {
            structure,
            think,
            answer,
            text: String::new(),
            logp_old: 0.0,
        };
        r.text = render(&r, schema);
        r
    }
}

pub fn render(response: &Response, schema: &ResponseSchema) -> String {
    let templates = match schema.mode {
        Mode::Think => &THINK_TEMPLATES,
        Mode::NoThink => &NO_THINK_TEMPLATES,
    };
    let think: String = response.think.iter().map(|t| format!("t{t} ")).collect();
    let letter = LETTERS
        .get(response.answer)
        .map(|c| c.to_string())
        .unwrap_or_else(|| "?".into());
    templates[response.structure.min(MAX_STRUCTURES - 1)]
        .replace("{T}", &think)
        .replace("{L}", &letter)
}

/// Per-slot weight matrices; each has `feature_dim + 1` columns, the last
/// one multiplying a constant bias input of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub schema: ResponseSchema,
    pub feature_dim: usize,
    pub role: Role,
    pub weights: Vec<Array2<f64>>,
}

/// Gradient with the same layout as [`PolicyParams::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub slots: Vec<Array2<f64>>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            slots: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.scaled_add(scale, b);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|m| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub fn init_policy(
    schema: &ResponseSchema,
    feature_dim: usize,
    seed: u64,
    scale: f64,
) -> Result<PolicyParams> {
    schema.validate()?;
    if feature_dim == 0 {
        return Err(Error::invalid("features", "must be positive"));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::invalid("scale", format!("{scale} must be >= 0")));
    }
    let mut rng = seed::stream(seed, "init-policy", "");
    let normal = Normal::new(0.0, scale).expect("finite scale");
    let weights = schema
        .slots()
        .map(|slot| {
            Array2::from_shape_simple_fn((schema.slot_size(slot), feature_dim + 1), || {
                normal.sample(&mut rng)
            })
        })
        .collect();
    Ok(PolicyParams {
        schema: schema.clone(),
        feature_dim,
        role: Role::New,
        weights,
    })
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("temp", format!("temperature {tau} must be > 0")))
    }
}

fn log_softmax(logits: &Array1<f64>, tau: f64) -> Array1<f64> {
    let scaled = logits / tau;
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + scaled.mapv(|v| (v - max).exp()).sum().ln();
    scaled - lse
}

fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl PolicyParams {
    /// Copy of these parameters under another role.
    pub fn with_role(&self, role: Role) -> PolicyParams {
        PolicyParams {
            role,
            ..self.clone()
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|m| m.iter().copied()).collect()
    }

    /// Same shapes and role with every weight replaced from `values`.
    pub fn from_flat(&self, values: &[f64]) -> PolicyParams {
        assert_eq!(values.len(), self.num_params());
        let mut out = self.clone();
        let mut it = values.iter();
        for m in &mut out.weights {
            m.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// `self += step * grad`. Only New-role parameters may move.
    pub fn ascend(&mut self, grad: &Gradient, step: f64) -> Result<()> {
        if self.role != Role::New {
            return Err(Error::Frozen { role: self.role });
        }
        for (w, g) in self.weights.iter_mut().zip(&grad.slots) {
            w.scaled_add(step, g);
        }
        Ok(())
    }

    pub fn check_item(&self, item: &VqaItem) -> Result<()> {
        if item.features.len() != self.feature_dim {
            return Err(Error::Mismatch {
                what: "feature dimension",
                left: self.feature_dim,
                left_src: "policy",
                right: item.features.len(),
                right_src: "dataset",
            });
        }
        if item.num_options() != self.schema.num_answers {
            return Err(Error::Mismatch {
                what: "option count",
                left: self.schema.num_answers,
                left_src: "policy",
                right: item.num_options(),
                right_src: "dataset",
            });
        }
        Ok(())
    }

    fn input(&self, item: &VqaItem) -> Array1<f64> {
        let mut x = Array1::ones(self.feature_dim + 1);
        x.slice_mut(ndarray::s![..self.feature_dim])
            .assign(&ArrayView1::from(&item.features[..]));
        x
    }

    /// Raw logits `W_slot · [x; 1]`.
    pub fn logits(&self, item: &VqaItem, slot: Slot) -> Result<Array1<f64>> {
        self.check_item(item)?;
        let i = self.schema.slot_index(slot)?;
        Ok(self.weights[i].dot(&self.input(item)))
    }

    fn check_response(&self, response: &Response) -> Result<()> {
        if response.think.len() != self.schema.num_think_slots {
            return Err(Error::invalid(
                "response",
                format!(
                    "{} think tokens, schema has {} slots",
                    response.think.len(),
                    self.schema.num_think_slots
                ),
            ));
        }
        for slot in self.schema.slots() {
            let (c, n) = (response.choice(slot), self.schema.slot_size(slot));
            if c >= n {
                return Err(Error::invalid(
                    "response",
                    format!("{slot:?} choice {c} is out of range 0..{n}"),
                ));
            }
        }
        Ok(())
    }
}

pub fn slot_distribution(
    params: &PolicyParams,
    item: &VqaItem,
    slot: Slot,
    tau: f64,
) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let logits = params.logits(item, slot)?;
    Ok(log_softmax(&logits, tau).mapv(f64::exp).to_vec())
}

fn sample_index<R: Rng + ?Sized>(logp: &Array1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Draws every slot independently at temperature `tau`. Callers pass the
/// behaviour (old snapshot) policy.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    item: &VqaItem,
    tau: f64,
    rng: &mut R,
) -> Result<Response> {
    check_temperature(tau)?;
    params.check_item(item)?;
    let x = params.input(item);
    let mut logp_total = 0.0;
    let mut choices = Vec::with_capacity(params.schema.num_slots());
    for w in &params.weights {
        let logp = log_softmax(&w.dot(&x), tau);
        let c = sample_index(&logp, rng);
        logp_total += logp[c];
        choices.push(c);
    }
    let answer = choices.pop().expect("answer slot");
    let structure = choices[0];
    let think = choices[1..].to_vec();
    let mut r = Response::from_choices(&params.schema, structure, think, answer);
    r.logp_old = logp_total;
    Ok(r)
}

pub fn response_log_prob(
    params: &PolicyParams,
    response: &Response,
    item: &VqaItem,
    tau: f64,
) -> Result<f64> {
    check_temperature(tau)?;
    params.check_item(item)?;
    params.check_response(response)?;
    let x = params.input(item);
    Ok(params
        .schema
        .slots()
        .zip(&params.weights)
        .map(|(slot, w)| log_softmax(&w.dot(&x), tau)[response.choice(slot)])
        .sum())
}

/// Gradient of [`response_log_prob`] with respect to every weight:
/// per slot, `(onehot(choice) - p) ⊗ [x; 1] / tau`.
pub fn log_prob_gradient(
    params: &PolicyParams,
    response: &Response,
    item: &VqaItem,
    tau: f64,
) -> Result<Gradient> {
    check_temperature(tau)?;
    params.check_item(item)?;
    params.check_response(response)?;
    let x = params.input(item);
    let slots = params
        .schema
        .slots()
        .zip(&params.weights)
        .map(|(slot, w)| {
            let mut coef = -log_softmax(&w.dot(&x), tau).mapv(f64::exp);
            coef[response.choice(slot)] += 1.0;
            coef /= tau;
            let mut g = Array2::zeros(w.dim());
            Zip::from(g.rows_mut())
                .and(&coef)
                .for_each(|mut row, &c| row.scaled_add(c, &x));
            g
        })
        .collect();
    Ok(Gradient { slots })
}

/// Per-slot argmax of the logits, ties toward the lowest index. `logp_old`
/// holds the log-probability at temperature 1.
pub fn greedy_decode(params: &PolicyParams, item: &VqaItem) -> Result<Response> {
    params.check_item(item)?;
    let x = params.input(item);
    let mut logp = 0.0;
    let mut choices: Vec<usize> = params
        .weights
        .iter()
        .map(|w| {
            let z = w.dot(&x);
            let c = argmax(&z);
            logp += log_softmax(&z, 1.0)[c];
            c
        })
        .collect();
    let answer = choices.pop().expect("answer slot");
    let think = choices.split_off(1);
    let mut r = Response::from_choices(&params.schema, choices[0], think, answer);
    r.logp_old = logp;
    Ok(r)
}

/// Sum of squared row sums, zero when every slot gradient sums to zero over rows.
pub fn row_sum_residual(grad: &Gradient) -> f64 {
    grad.slots
        .iter()
        .map(|g| g.sum_axis(Axis(0)).mapv(|v| v * v).sum())
        .sum()
}
