//! Experiment presets shipped with the crate (sources live in `presets/`).

pub const ALL: [(&str, &str); 7] = [
    ("linear-full", include_str!("../../../../presets/linear-full.toml")),
    ("linear-under", include_str!("../../../../presets/linear-under.toml")),
    ("linear-over", include_str!("../../../../presets/linear-over.toml")),
    ("linear-chi2", include_str!("../../../../presets/linear-chi2.toml")),
    ("elliptic1d-s1", include_str!("../../../../presets/elliptic1d-s1.toml")),
    ("elliptic1d-s2", include_str!("../../../../presets/elliptic1d-s2.toml")),
    ("elliptic2d", include_str!("../../../../presets/elliptic2d.toml")),
];

pub fn get(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    ALL.iter().map(|(n, _)| *n)
}
