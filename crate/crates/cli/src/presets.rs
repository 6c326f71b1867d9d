//! Bundled run specifications, one per reproduced figure.

use anyhow::{bail, Result};

use crate::config::RunSpec;

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        pub const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../presets/", $name, ".json")))),*
        ];
    };
}

presets!(
    "fig-epszero-1d-a",
    "fig-epszero-1d-b",
    "fig-epszero-1d-c",
    "fig-asym-1d-a",
    "fig-asym-1d-b",
    "fig-asym-1d-c",
    "overlap-vs-eps",
    "pde-eps-1d",
    "mix-meet",
    "mixing1d",
    "pde-vs-admm-2d",
    "fig-epszero-2d-a",
    "fig-epszero-2d-b",
    "fig-epszero-2d-c",
    "fig-admm-2d-a",
    "fig-admm-2d-b",
    "fig-admm-2d-c",
    "fig-admm-2d-d",
);

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<RunSpec> {
    match PRESETS.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => RunSpec::from_json(text),
        None => bail!(
            "unknown preset `{name}`; available: {}",
            names().collect::<Vec<_>>().join(", ")
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    #[test]
    fn every_preset_parses_and_validates() {
        for name in names() {
            let spec = preset(name).unwrap_or_else(|e| panic!("{name}: {e:#}"));
            assert_eq!(spec.name, name);
            let mesh = spec.build_mesh().unwrap();
            spec.validate(&mesh).unwrap_or_else(|e| panic!("{name}: {e:#}"));
        }
    }

    #[test]
    fn first_figure_preset_matches_its_caption() {
        let s = preset("fig-epszero-1d-a").unwrap();
        assert_eq!(s.mode, Mode::Minimize);
        assert_eq!(s.model.eps, 0.0);
        assert_eq!((s.model.c11, s.model.c22), (-0.4, -0.5));
        assert_eq!((s.model.m_r, s.model.m_b), (Some(1.0 / 3.0), Some(1.0 / 3.0)));
        let m = s.build_mesh().unwrap();
        assert_eq!(m.n_nodes(), 1000);
    }

    #[test]
    fn overlap_sweep_lists_five_values() {
        let s = preset("overlap-vs-eps").unwrap();
        assert_eq!(s.sweep.unwrap().eps, vec![0.0, 0.001, 0.01, 0.05, 0.1]);
        assert_eq!((s.model.c11, s.model.c22), (-1.0, -1.5));
    }

    #[test]
    fn mix_meet_snapshots_at_figure_times() {
        let s = preset("mix-meet").unwrap();
        assert_eq!(s.evolve.snapshot_times, vec![5.0, 20.0, 50.0, 75.0]);
        assert_eq!((s.model.eps, s.evolve.tau), (0.0002, 0.0005));
    }

    #[test]
    fn unknown_preset_lists_alternatives() {
        let e = preset("nope").unwrap_err().to_string();
        assert!(e.contains("mix-meet"));
    }
}
