//! The training loop.

use std::fs::File;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{Sparsifier, TrainConfig};
use super::data::{load_split, sample_batch, Split};
use super::optim::{clip_global_norm, lr_at, AdamW};
use crate::error::{Error, Result};
use crate::metrics::SparsityReport;
use crate::model::TransformerLm;
use crate::numerics::{Tensor2D, Var};
use crate::objectives::{
    chunk_sparsification_with_grad, l1_with_grad, load_balance_with_grad, router_entropy_with_grad, LocalityLoss,
    LossBundle, SchedulerState,
};

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_lm")]
    pub l_lm: f64,
    #[serde(rename = "L_al")]
    pub l_al: f64,
    /// Chunk sparsification value, logged whatever the active sparsifier.
    #[serde(rename = "L_cs")]
    pub l_cs: f64,
    /// Coefficient of the active sparsifier, zero when there is none.
    pub lambda_cs: f64,
    pub tls: f64,
    pub cls8: Option<f64>,
    pub reuse: Option<f64>,
}

/// Losses of one optimizer step, averaged over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub lr: f64,
    pub bundle: LossBundle,
    /// Chunk sparsification value (diagnostic when another sparsifier is active).
    pub cs_value: f64,
    pub grad_norm: f64,
    /// Router activations `A` of each layer on the step's batch.
    pub activations: Vec<Tensor2D<f32>>,
}

/// Owns the model, optimizer state and data of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TransformerLm<f32>,
    pub data: Split,
    optim: AdamW<f32>,
    scheduler: Option<SchedulerState>,
    rng: ChaCha8Rng,
    pub step: usize,
}

/// Coefficient of the active sparsifier before the scheduler sees the step.
fn scheduler_for(config: &TrainConfig) -> Result<Option<SchedulerState>> {
    let o = &config.objective;
    if o.sparsifier == Sparsifier::None || o.lambda0 == 0.0 {
        return Ok(None);
    }
    let n_adj = if o.adaptive { o.n_adj } else { usize::MAX };
    Ok(Some(SchedulerState::new(o.lambda0, o.n_st, n_adj, o.gamma_min)?))
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let data = load_split(&config.data)?;
        Self::with_data(config, data)
    }

    /// Trainer over an already loaded stream.
    pub fn with_data(config: &TrainConfig, data: Split) -> Result<Self> {
        config.validate()?;
        if data.train.len() <= config.data.seq_len {
            return Err(Error::SequenceTooShort { len: data.train.len(), chunk: config.data.seq_len + 1 });
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = TransformerLm::init(&config.model, &mut init_rng)?;
        let shapes: Vec<_> = model.tensors().iter().map(|(_, t)| t.shape()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optim: AdamW::new(&config.optim, &shapes),
            scheduler: scheduler_for(config)?,
            config: config.clone(),
            model,
            data,
            rng,
            step: 0,
        })
    }

    pub fn lambda_cs(&self) -> f64 {
        self.scheduler.as_ref().map_or(0.0, |s| s.lambda)
    }

    /// One forward, backward and parameter update.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let c = &self.config;
        let o = &c.objective;
        let step = self.step + 1;
        let lr = lr_at(&c.optim, step);
        let seq_len = c.data.seq_len;
        let (inputs, targets) = sample_batch(&self.data.train, c.data.batch_size, seq_len, &mut self.rng)?;
        let mut trace = self.model.record(&inputs, &targets, seq_len)?;
        let tape = &mut trace.tape;
        let n_layers = trace.routers.len() as f64;
        let lambda_cs = self.lambda_cs();
        let lm = tape.value(trace.lm_loss)[(0, 0)] as f64;
        let diverged = |detail: &str| Error::Diverged { step, detail: detail.to_string() };
        if !lm.is_finite() {
            return Err(diverged("non-finite language-modeling loss"));
        }
        let mut terms: Vec<(Var, f32)> = vec![(trace.lm_loss, 1.0)];
        let (mut al, mut cs, mut sparsity, mut aux) = (0.0, 0.0, 0.0, 0.0);
        let locality = LocalityLoss { alpha: o.alpha, detach_target: false };
        let mut activations = Vec::with_capacity(trace.routers.len());
        for r in &trace.routers {
            let a0 = tape.value(r.a0).clone();
            let a1 = tape.value(r.a1).clone();
            if !a0.all_finite() || !a1.all_finite() {
                return Err(diverged("non-finite router activations"));
            }
            activations.push(tape.value(r.a).clone());

            let (v, g) = locality.with_grad(&a0, seq_len)?;
            al += v as f64;
            if o.al && o.lambda_al > 0.0 {
                let var = tape.scalar_loss(r.a0, v, g)?;
                terms.push((var, (o.lambda_al / n_layers) as f32));
            }

            let (cs_v, cs_g) = chunk_sparsification_with_grad(&a1, o.chunk_len)?;
            cs += cs_v as f64;
            let sparsifier = match o.sparsifier {
                Sparsifier::Cs => Some((cs_v, cs_g)),
                Sparsifier::L1 => Some(l1_with_grad(&a1)?),
                Sparsifier::Ent => Some(router_entropy_with_grad(&a1)?),
                Sparsifier::None => None,
            };
            if let Some((v, g)) = sparsifier {
                sparsity += v as f64;
                if lambda_cs > 0.0 {
                    let var = tape.scalar_loss(r.a1, v, g)?;
                    terms.push((var, (lambda_cs / n_layers) as f32));
                }
            }

            if o.balance && o.lambda_balance > 0.0 {
                let (v, g) = load_balance_with_grad(&a1)?;
                aux += v as f64;
                let var = tape.scalar_loss(r.a1, v, g)?;
                terms.push((var, (o.lambda_balance / n_layers) as f32));
            }
        }
        let (al, cs, sparsity, aux) = (al / n_layers, cs / n_layers, sparsity / n_layers, aux / n_layers);
        let lambda_al = if o.al { o.lambda_al } else { 0.0 };
        let lambda_aux = if o.balance { o.lambda_balance } else { 0.0 };
        let bundle = LossBundle::compose(lm, al, sparsity, aux, lambda_al, lambda_cs, lambda_aux).map_err(|_| {
            Error::Diverged { step, detail: format!("non-finite loss (lm = {lm}, al = {al}, cs = {cs})") }
        })?;

        let total = tape.weighted_sum(&terms)?;
        let grads = tape.backward(total);
        let mut grads: Vec<Tensor2D<f32>> =
            trace.params.iter().zip(self.model.tensors()).map(|(&v, (_, t))| grads.wrt(v, t)).collect();
        let grad_norm = clip_global_norm(&mut grads, c.optim.clip)
            .map_err(|_| Error::Diverged { step, detail: "non-finite gradient".into() })?;
        self.optim.step(&mut self.model.tensors_mut(), &grads, lr)?;
        if let Some(s) = &mut self.scheduler {
            s.observe(sparsity)?;
        }
        self.step = step;
        Ok(StepOutcome { step, lr, bundle, cs_value: cs, grad_norm, activations })
    }

    /// Metric log line of a step.
    pub fn log_row(&self, outcome: &StepOutcome) -> Result<LogRow> {
        let seq_len = self.config.data.seq_len;
        let mut reports = Vec::new();
        for a in &outcome.activations {
            for s in 0..a.rows() / seq_len {
                reports.push(SparsityReport::measure(&a.slice_rows(s * seq_len, seq_len), &[8], 0.0)?);
            }
        }
        let mean = SparsityReport::average(&reports).ok_or(Error::Empty("log_row"))?;
        Ok(LogRow {
            step: outcome.step,
            lr: outcome.lr,
            l_lm: outcome.bundle.lm,
            l_al: outcome.bundle.al,
            l_cs: outcome.cs_value,
            lambda_cs: outcome.bundle.lambda_cs,
            tls: mean.tls,
            cls8: mean.cls.get(&8).copied(),
            reuse: mean.reuse_ratio,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(&self.config, self.step as u64, self.model.clone())
    }

    /// Trains for the configured number of steps. With `out_dir`, writes
    /// `metrics.csv`, periodic `step{N}.bffn` checkpoints and `final.bffn`;
    /// on divergence a `diverged.bffn` snapshot is written before failing.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<LogRow>> {
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.csv");
                Some(csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        let mut log = Vec::new();
        while self.step < self.config.data.steps {
            let outcome = match self.train_step() {
                Ok(o) => o,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint()?.save(&dir.join("diverged.bffn"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let d = &self.config.data;
            if outcome.step % d.log_every == 0 || outcome.step == d.steps {
                let row = self.log_row(&outcome)?;
                if let Some(w) = &mut writer {
                    w.serialize(&row)?;
                    w.flush().map_err(|e| Error::io("metrics.csv", e))?;
                }
                log.push(row);
            }
            if let Some(dir) = out_dir {
                if d.checkpoint_every > 0 && outcome.step % d.checkpoint_every == 0 {
                    self.checkpoint()?.save(&dir.join(format!("step{}.bffn", outcome.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&dir.join("final.bffn"))?;
        }
        Ok(log)
    }
}

/// Trains `config` from scratch.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<(TransformerLm<f32>, Vec<LogRow>)> {
    let mut t = Trainer::new(config)?;
    let log = t.run(out_dir)?;
    Ok((t.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::tests::EXAMPLE;

    fn config() -> TrainConfig {
        TrainConfig::from_toml(EXAMPLE).unwrap()
    }

    #[test]
    fn seeded_runs_write_identical_logs() {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            train(&config(), Some(d.path())).unwrap();
        }
        let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
        assert_eq!(read(&dirs[0], "metrics.csv"), read(&dirs[1], "metrics.csv"));
        assert_eq!(read(&dirs[0], "final.bffn"), read(&dirs[1], "final.bffn"));
        let header = String::from_utf8(read(&dirs[0], "metrics.csv")).unwrap();
        assert!(header.starts_with("step,lr,L_lm,L_al,L_cs,lambda_cs,tls,cls8,reuse\n"));
    }

    #[test]
    fn null_objective_has_zero_coefficients() {
        let mut c = config();
        c.objective.al = false;
        c.objective.sparsifier = Sparsifier::None;
        let (_, log) = train(&c, None).unwrap();
        assert!(log.iter().all(|r| r.lambda_cs == 0.0));
        let mut t = Trainer::new(&c).unwrap();
        let o = t.train_step().unwrap();
        assert_eq!(o.bundle.total, o.bundle.lm);
    }

    #[test]
    fn zero_coefficient_is_inert() {
        let mut off = config();
        off.objective.al = false;
        let mut zero = config();
        zero.objective.lambda_al = 0.0;
        assert_eq!(train(&off, None).unwrap().0, train(&zero, None).unwrap().0);

        let mut none = config();
        none.objective.sparsifier = Sparsifier::None;
        let mut zero = config();
        zero.objective.lambda0 = 0.0;
        assert_eq!(train(&none, None).unwrap().0, train(&zero, None).unwrap().0);
    }

    #[test]
    fn objectives_change_the_trajectory() {
        let mut none = config();
        none.objective.sparsifier = Sparsifier::None;
        assert_ne!(train(&none, None).unwrap().0, train(&config(), None).unwrap().0);
    }

    #[test]
    fn loss_decreases_on_toy_corpus() {
        let mut c = config();
        c.data.steps = 60;
        c.optim.stable = 60;
        let mut t = Trainer::new(&c).unwrap();
        let first = t.train_step().unwrap().bundle.lm;
        let mut last = first;
        while t.step < 60 {
            last = t.train_step().unwrap().bundle.lm;
        }
        assert!(last < first - 1.0, "{first} -> {last}");
    }

    #[test]
    fn divergence_writes_diagnostic_checkpoint() {
        let mut c = config();
        c.optim.lr = 1e30;
        c.optim.warmup = 0;
        let dir = tempfile::tempdir().unwrap();
        let err = train(&c, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(dir.path().join("diverged.bffn").exists());
    }
}
