//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::models::{LatentKind, LatentSpec};
use crate::objectives::{BaseEstimator, ObjectiveConfig, ObjectiveKind, ObjectiveSpec};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const KEYS: [&str; 20] = [
    "latent_kind",
    "n_latents",
    "n_categories",
    "vocab_size",
    "hidden_size",
    "emb_size",
    "base",
    "k_lik",
    "k_mi",
    "objective",
    "lambda",
    "alpha",
    "lr",
    "batch_size",
    "steps",
    "seed",
    "l2",
    "eval_every",
    "eval_k",
    "out_dir",
];

/// Accepted range of λ: slightly negative values are allowed for
/// experiments that push information out of the latents.
pub const LAMBDA_MIN: f64 = -0.05;
pub const LAMBDA_MAX: f64 = 0.9999;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

/// Parsed but unresolved entries, with the line each came from. Overrides
/// set through [`RawConfig::set`] report line 0.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<(String, String, usize)>,
}

fn line_err(line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigLine {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(line_err(n, content, "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(line_err(n, key, "unknown key"));
            }
            if let Some((_, _, first)) = raw.entries.iter().find(|e| e.0 == key) {
                return Err(line_err(n, key, format!("duplicate key (first set on line {first})")));
            }
            if value.is_empty() {
                return Err(line_err(n, key, "missing value"));
            }
            raw.entries.push((key.to_string(), value.to_string(), n));
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(line_err(0, key, "unknown key"));
        }
        let value = value.into();
        match self.entries.iter_mut().find(|e| e.0 == key) {
            Some(e) => {
                e.1 = value;
                e.2 = 0;
            }
            None => self.entries.push((key.to_string(), value, 0)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.iter().find(|e| e.0 == key).map_or(0, |e| e.2)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.iter().find(|e| e.0 == key) {
            None => Ok(None),
            Some((_, v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| line_err(*line, key, format!("`{v}`: {e}"))),
        }
    }

    fn count(&self, key: &str, default: usize, min: usize) -> Result<usize> {
        let v = self.parsed::<usize>(key)?.unwrap_or(default);
        if v < min {
            return Err(line_err(self.line_of(key), key, format!("must be ≥ {min}, got {v}")));
        }
        Ok(v)
    }

    fn real(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parsed::<f64>(key)?.unwrap_or(default);
        if !v.is_finite() {
            return Err(line_err(self.line_of(key), key, "must be finite"));
        }
        Ok(v)
    }

    /// Fills defaults and applies every cross-key check.
    pub fn resolve(&self) -> Result<Config> {
        let kind = match self.get("latent_kind") {
            None | Some("continuous") => LatentKind::Continuous,
            Some("categorical") => LatentKind::Categorical,
            Some(other) => {
                return Err(line_err(
                    self.line_of("latent_kind"),
                    "latent_kind",
                    format!("`{other}`: expected continuous or categorical"),
                ))
            }
        };
        let default = LatentSpec::default_for(kind);
        let n_latents = self.count("n_latents", default.n_latents, 1)?;
        let latent = match kind {
            LatentKind::Continuous => {
                if self.get("n_categories").is_some() {
                    return Err(line_err(
                        self.line_of("n_categories"),
                        "n_categories",
                        "only applies to categorical latents",
                    ));
                }
                LatentSpec::continuous(n_latents)
            }
            LatentKind::Categorical => {
                LatentSpec::categorical(n_latents, self.count("n_categories", default.n_categories, 2)?)
            }
        };

        let base = match self.parsed::<BaseEstimator>("base")? {
            Some(b) => b,
            None if kind == LatentKind::Continuous => BaseEstimator::ElboAnalytic,
            None => BaseEstimator::Reinforce,
        };
        let k_lik = self.count("k_lik", 1, 1)?;
        let k_mi = self.count("k_mi", k_lik, 1)?;
        let objective = self
            .parsed::<ObjectiveKind>("objective")?
            .unwrap_or(ObjectiveKind::None);
        let alpha = self.real("alpha", 1.0)?;
        let lambda_set = self.get("lambda").is_some();
        let lambda = self.real("lambda", 0.0)?;
        let lambda_line = self.line_of("lambda");
        let alpha_line = self.line_of("alpha");
        let spec = match objective {
            ObjectiveKind::None => {
                if lambda != 0.0 {
                    return Err(line_err(lambda_line, "lambda", "has no effect with objective = none"));
                }
                ObjectiveSpec::none()
            }
            ObjectiveKind::Kl => ObjectiveSpec::kl(lambda),
            ObjectiveKind::Renyi => ObjectiveSpec::renyi(lambda, alpha),
            ObjectiveKind::Power => {
                if lambda_set {
                    return Err(line_err(
                        lambda_line,
                        "lambda",
                        "is implied by alpha for the power objective; remove it",
                    ));
                }
                ObjectiveSpec::power(alpha)
            }
        };
        if matches!(objective, ObjectiveKind::Kl | ObjectiveKind::Renyi) && !(LAMBDA_MIN..=LAMBDA_MAX).contains(&lambda)
        {
            return Err(line_err(
                lambda_line,
                "lambda",
                format!("must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}], got {lambda}"),
            ));
        }
        spec.validate().map_err(|e| line_err(alpha_line, "alpha", strip(e)))?;
        let objective = ObjectiveConfig {
            base,
            k_lik,
            k_mi,
            spec,
        };
        objective
            .validate(kind)
            .map_err(|e| line_err(self.line_of("base"), "base", strip(e)))?;

        let lr = self.real("lr", 1e-3)?;
        if lr <= 0.0 {
            return Err(line_err(self.line_of("lr"), "lr", "must be positive"));
        }
        let l2 = self.real("l2", 0.0)?;
        if l2 < 0.0 {
            return Err(line_err(self.line_of("l2"), "l2", "must be ≥ 0"));
        }
        let train = TrainConfig {
            latent,
            vocab_size: self.count("vocab_size", 10_000, 1)?,
            hidden_size: self.count("hidden_size", 128, 1)?,
            emb_size: self.count("emb_size", 128, 1)?,
            objective,
            lr,
            batch_size: self.count("batch_size", 256, 1)?,
            steps: self.count("steps", 40_000, 0)?,
            seed: self.parsed::<u64>("seed")?.unwrap_or(0),
            l2,
            eval_every: self.count("eval_every", 1000, 1)?,
            eval_k: self.count("eval_k", 100, 1)?,
        };
        train.validate()?;
        let out_dir = PathBuf::from(self.get("out_dir").unwrap_or("out"));
        Ok(Config { train, out_dir })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidConfig(msg) => msg,
        other => other.to_string(),
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    RawConfig::parse(text)?.resolve()
}

pub fn read_raw_config(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RawConfig::parse(&text)
}

impl Config {
    /// Every key with its resolved value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let o = &t.objective;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("latent_kind", t.latent.kind.to_string());
        put("n_latents", t.latent.n_latents.to_string());
        if t.latent.kind == LatentKind::Categorical {
            put("n_categories", t.latent.n_categories.to_string());
        }
        put("vocab_size", t.vocab_size.to_string());
        put("hidden_size", t.hidden_size.to_string());
        put("emb_size", t.emb_size.to_string());
        put("base", o.base.to_string());
        put("k_lik", o.k_lik.to_string());
        put("k_mi", o.k_mi.to_string());
        put("objective", o.spec.objective.as_str().to_string());
        if matches!(o.spec.objective, ObjectiveKind::Kl | ObjectiveKind::Renyi) {
            put("lambda", o.spec.lambda.to_string());
        }
        put("alpha", o.spec.alpha.to_string());
        put("lr", t.lr.to_string());
        put("batch_size", t.batch_size.to_string());
        put("steps", t.steps.to_string());
        put("seed", t.seed.to_string());
        put("l2", t.l2.to_string());
        put("eval_every", t.eval_every.to_string());
        put("eval_k", t.eval_k.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_at(text: &str) -> (usize, String) {
        match parse_config(text).unwrap_err() {
            Error::ConfigLine { line, key, .. } => (line, key),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn defaults() {
        let c = parse_config("").unwrap();
        let t = &c.train;
        assert_eq!(t.latent, LatentSpec::continuous(40));
        assert_eq!(
            t.objective,
            ObjectiveConfig::new(BaseEstimator::ElboAnalytic, 1, ObjectiveSpec::none())
        );
        assert_eq!((t.vocab_size, t.hidden_size, t.emb_size), (10_000, 128, 128));
        assert_eq!(
            (t.batch_size, t.steps, t.eval_every, t.eval_k),
            (256, 40_000, 1000, 100)
        );
        assert_eq!((t.lr, t.l2, t.seed), (1e-3, 0.0, 0));
        assert_eq!(c.out_dir, PathBuf::from("out"));
        let c = parse_config("latent_kind = categorical").unwrap();
        assert_eq!(c.train.latent, LatentSpec::categorical(8, 10));
        assert_eq!(c.train.objective.base, BaseEstimator::Reinforce);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# sweep base\nbase = vimco  # multi-sample\nk_lik = 16\nlatent_kind = categorical\nobjective = renyi\nlambda = 0.4\nalpha = 2\n";
        let mut raw = RawConfig::parse(text).unwrap();
        let c = raw.resolve().unwrap();
        assert_eq!(c.train.objective.k_mi, 16);
        assert_eq!(c.train.objective.spec, ObjectiveSpec::renyi(0.4, 2.0));
        raw.set("lambda", "0.9").unwrap();
        assert_eq!(raw.resolve().unwrap().train.objective.spec.lambda, 0.9);
    }

    #[test]
    fn rejections_name_line_and_key() {
        assert_eq!(err_at("steps = 1\nlearning_rate = 0.1"), (2, "learning_rate".into()));
        assert_eq!(
            err_at("objective = renyi\nalpha = 1.0\nlambda = 0.5"),
            (2, "alpha".into())
        );
        assert_eq!(err_at("objective = kl\nlambda = 1.0"), (2, "lambda".into()));
        assert_eq!(
            err_at("objective = power\nalpha = 2\nlambda = 0.5"),
            (3, "lambda".into())
        );
        assert_eq!(err_at("base = vimco"), (1, "base".into()));
        assert_eq!(err_at("k_lik = 0"), (1, "k_lik".into()));
        assert_eq!(err_at("seed = 1\nseed = 2"), (2, "seed".into()));
        assert_eq!(err_at("lr = abc"), (1, "lr".into()));
        assert_eq!(err_at("n_categories = 3"), (1, "n_categories".into()));
    }

    #[test]
    fn lambda_bounds_are_inclusive() {
        for l in ["-0.05", "0.9999"] {
            assert!(parse_config(&format!("objective = kl\nlambda = {l}")).is_ok());
        }
        assert!(parse_config("objective = kl\nlambda = -0.06").is_err());
    }

    #[test]
    fn text_round_trip() {
        for text in [
            "",
            "latent_kind = categorical\nbase = vimco\nk_lik = 4\nk_mi = 2\nobjective = kl\nlambda = 0.3",
            "objective = power\nalpha = 3\nbase = iwae\nk_lik = 5",
        ] {
            let c = parse_config(text).unwrap();
            assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        }
    }
}
