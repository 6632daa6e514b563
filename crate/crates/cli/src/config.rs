//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Command-line flags override the
//! file, and `--set key=value` overrides both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use simkrig::SurrogateConfig;

use crate::CliError;

/// Recognized keys with a one-line description, printed by `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("design, curves, times, box, surrogate, points, test_design, test_curves", "input paths"),
    ("out_dir", "output directory"),
    ("period", "curve period when no sample times are available"),
    ("seed", "sets est_seed and gp_seed together"),
    ("block_size", "curves per registration block (reference included)"),
    ("beta", "exponent of the frequency weights |l|^-beta"),
    ("alpha_min, alpha_max", "bounds on the estimated amplitude scales"),
    ("max_freq", "highest frequency in the contrast, or `all`"),
    ("est_multistarts, est_max_iters, est_seed", "registration optimizer"),
    ("gp_multistarts, gp_max_iters, gp_seed", "likelihood optimizer"),
    ("length_min, length_max", "correlation length bounds (unit-cube inputs)"),
    ("nugget_floor", "smallest nugget tried"),
    ("fixed", "families held constant: comma list of alpha, theta, v, or `none`"),
    ("fixed_tol", "relative variance under which a family is held constant"),
    ("time_windows", "independent surrogates on this many time windows"),
];

const PATH_KEYS: &[&str] = &[
    "design",
    "curves",
    "times",
    "box",
    "surrogate",
    "points",
    "test_design",
    "test_curves",
    "out_dir",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub surrogate: SurrogateConfig,
    pub period: Option<f64>,
    paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Input(format!("{}:{}: expected `key = value`", path.display(), i + 1))
                })?;
                cfg.set(k.trim(), v.trim())
                    .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let s = &mut self.surrogate;
        match key {
            k if PATH_KEYS.contains(&k) => {
                self.paths.insert(k.to_string(), PathBuf::from(value));
            }
            "period" => self.period = Some(num(key, value)?),
            "seed" => {
                let seed = num(key, value)?;
                s.estimation.seed = seed;
                s.gp.seed = seed;
            }
            "block_size" => s.block_size = num(key, value)?,
            "beta" => s.estimation.beta_exponent = num(key, value)?,
            "alpha_min" => s.estimation.alpha_min = num(key, value)?,
            "alpha_max" => s.estimation.alpha_max = num(key, value)?,
            "max_freq" => {
                s.estimation.max_freq = if value == "all" { None } else { Some(num(key, value)?) }
            }
            "est_multistarts" => s.estimation.multistarts = num(key, value)?,
            "est_max_iters" => s.estimation.max_iters = num(key, value)?,
            "est_seed" => s.estimation.seed = num(key, value)?,
            "gp_multistarts" => s.gp.multistarts = num(key, value)?,
            "gp_max_iters" => s.gp.max_iters = num(key, value)?,
            "gp_seed" => s.gp.seed = num(key, value)?,
            "length_min" | "length_max" => {
                let v: f64 = num(key, value)?;
                let (mut lo, mut hi) = s.gp.length_bounds.first().copied().unwrap_or((1e-3, 1e3));
                if key == "length_min" {
                    lo = v;
                } else {
                    hi = v;
                }
                s.gp.length_bounds = vec![(lo, hi)];
            }
            "nugget_floor" => s.gp.nugget_floor = num(key, value)?,
            "fixed" => {
                let mut fixed = [false; 3];
                for name in value.split(',').map(str::trim).filter(|n| !n.is_empty() && *n != "none") {
                    match name {
                        "alpha" => fixed[0] = true,
                        "theta" => fixed[1] = true,
                        "v" => fixed[2] = true,
                        other => return Err(format!("unknown family `{other}` in `fixed`")),
                    }
                }
                s.force_fixed = fixed;
            }
            "fixed_tol" => s.fixed_tol = num(key, value)?,
            "time_windows" => s.time_windows = num(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{value}` is not a valid value for `{key}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nblock_size = 5\nseed = 3\nfixed = theta, v\ncurves = c.csv\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["block_size=7".into()]).unwrap();
        assert_eq!(cfg.surrogate.block_size, 7);
        assert_eq!(cfg.surrogate.gp.seed, 3);
        assert_eq!(cfg.surrogate.force_fixed, [false, true, true]);
        assert_eq!(cfg.path("curves"), Some(Path::new("c.csv")));
    }

    #[test]
    fn bad_lines_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "beta = 1.5\nbeta: 2\n").unwrap();
        match RunConfig::load(Some(&path), &[]) {
            Err(CliError::Input(msg)) => assert!(msg.contains(":2:"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::load(None, &["nope=1".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn max_freq_all() {
        let cfg = RunConfig::load(None, &["max_freq=4".into(), "max_freq=all".into()]).unwrap();
        assert_eq!(cfg.surrogate.estimation.max_freq, None);
    }
}
