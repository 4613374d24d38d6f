//! Flat `key=value` configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored. Unknown keys are
//! rejected. Later assignments (and command-line overrides applied afterwards) win.

use crate::gp::KernelForm;
use crate::trainer::{InputTransform, TrainConfig};
use crate::{Error, Result};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::input(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_probes(value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(':')
                .ok_or_else(|| Error::input(format!("probe {p:?} is not x:y")))?;
            Ok((parse("probes", x.trim())?, parse("probes", y.trim())?))
        })
        .collect()
}

impl TrainConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "sigma2" => self.sigma2 = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "length_scale" => self.length_scale = parse(key, v)?,
            "kernel" => self.kernel_form = v.parse::<KernelForm>()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "known_count" => self.known_count = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "corruption_std" => self.corruption_std = parse(key, v)?,
            "eval_subset" => self.eval_subset = parse(key, v)?,
            "input_transform" => self.input_transform = v.parse::<InputTransform>()?,
            "input_scale" => self.input_scale = parse(key, v)?,
            "probes" => self.probes = parse_probes(v)?,
            other => return Err(Error::input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::input(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::input(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration as `key=value` lines accepted by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let probes = self
            .probes
            .iter()
            .map(|(x, y)| format!("{x}:{y}"))
            .collect::<Vec<_>>()
            .join(",");
        [
            format!("beta={}", self.beta),
            format!("gamma={}", self.gamma),
            format!("sigma2={}", self.sigma2),
            format!("jitter={}", self.jitter),
            format!("length_scale={}", self.length_scale),
            format!("kernel={}", self.kernel_form.name()),
            format!("batch_size={}", self.batch_size),
            format!("known_count={}", self.known_count),
            format!("epochs={}", self.epochs),
            format!("lr={}", self.adam.lr),
            format!("beta1={}", self.adam.beta1),
            format!("beta2={}", self.adam.beta2),
            format!("eps={}", self.adam.eps),
            format!("seed={}", self.seed),
            format!("hidden_dims={}", list(&self.hidden_dims)),
            format!("latent_dim={}", self.latent_dim),
            format!("corruption_std={}", self.corruption_std),
            format!("eval_subset={}", self.eval_subset),
            format!("input_transform={}", self.input_transform.name()),
            format!("input_scale={}", self.input_scale),
            format!("probes={probes}"),
        ]
        .join("\n")
            + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_training_setup() {
        let cfg = TrainConfig::from_text("").unwrap();
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.gamma, 1.0);
        assert_eq!(cfg.batch_size, 96);
        assert_eq!(cfg.known_count, 48);
        assert_eq!(cfg.adam.lr, 1e-4);
        assert_eq!(cfg.adam.beta1, 0.9);
        assert_eq!(cfg.adam.beta2, 0.999);
        assert_eq!(cfg.length_scale, 2.0);
    }

    #[test]
    fn parses_comments_lists_and_probes() {
        let cfg = TrainConfig::from_text(
            "# comment\nbeta = 0.5  # trailing\n\nhidden_dims=64,16\nprobes=0.5:0.25, 0.1:0.9\nkernel=squared\n",
        )
        .unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.hidden_dims, vec![64, 16]);
        assert_eq!(cfg.probes, vec![(0.5, 0.25), (0.1, 0.9)]);
        assert_eq!(cfg.kernel_form, KernelForm::Squared);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_text("bogus=1").is_err());
        assert!(TrainConfig::from_text("beta=abc").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
        assert!(TrainConfig::from_text("known_count=96").is_err());
        assert!(TrainConfig::from_text("beta=-1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("sigma2", "0.003").unwrap();
        cfg.set("probes", "0.2:0.3").unwrap();
        let again = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }
}
