//! Published cross-domain and cross-task accuracy tables (percent).

pub const DOMAINS: [&str; 8] = ["CT", "MRI", "X-Ray", "US", "Der", "FP", "OCT", "Micro"];

pub const DOMAIN_CELLS: [[f64; 8]; 8] = [
    [98.30, 74.43, 80.61, 51.93, 64.17, 65.39, 70.52, 66.13],
    [62.33, 99.29, 73.75, 53.18, 75.04, 64.57, 75.59, 66.31],
    [79.67, 68.29, 95.85, 49.32, 70.75, 76.87, 70.28, 67.75],
    [55.88, 63.96, 70.53, 99.86, 64.78, 63.02, 63.92, 71.53],
    [53.81, 67.36, 73.31, 49.80, 95.10, 70.22, 64.03, 67.93],
    [54.98, 65.95, 75.79, 49.08, 71.36, 92.44, 65.33, 66.40],
    [64.48, 70.80, 77.09, 52.65, 72.89, 73.41, 99.17, 66.85],
    [60.97, 63.25, 74.92, 52.56, 64.55, 63.66, 66.86, 93.51],
];
pub const DOMAIN_ROW_OVERALL: [f64; 8] = [71.44, 71.26, 72.35, 69.19, 67.71, 67.67, 72.17, 67.54];
pub const DOMAIN_COL_OVERALL: [f64; 8] = [66.30, 71.67, 77.73, 57.31, 72.33, 71.20, 71.96, 70.80];
pub const DOMAIN_GRAND: f64 = 69.91;

pub const TASK_CELLS: [[f64; 5]; 5] = [
    [96.06, 59.07, 55.51, 98.62, 74.86],
    [54.16, 98.25, 73.85, 97.87, 84.09],
    [52.30, 57.72, 86.24, 97.32, 74.29],
    [55.30, 55.43, 56.88, 99.46, 70.88],
    [56.60, 59.93, 56.88, 97.91, 96.59],
];
pub const TASK_ROW_OVERALL: [f64; 5] = [76.83, 81.64, 73.57, 67.59, 73.58];
pub const TASK_COL_OVERALL: [f64; 5] = [62.88, 66.08, 65.87, 98.24, 80.14];
pub const TASK_GRAND: f64 = 74.64;

pub fn rows<const N: usize>(cells: &[[f64; N]]) -> Vec<Vec<f64>> {
    cells.iter().map(|r| r.to_vec()).collect()
}
