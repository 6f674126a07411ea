//! Per-dataset threshold ratios `p` (percent of pooled scores flagged).

/// Known benchmark names and their `p` values.
pub const DATASET_P: &[(&str, f64)] = &[
    ("SMD", 0.5),
    ("MSL", 1.0),
    ("PSM", 1.0),
    ("SMAP", 1.0),
    ("SWaT", 0.1),
];

/// `p` for a dataset name, case-insensitive.
pub fn dataset_p(name: &str) -> Option<f64> {
    DATASET_P
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|&(_, p)| p)
}
