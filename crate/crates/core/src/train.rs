//! Data preparation, the training loop, evaluation and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic, load_dataset, make_batches, DatasetInfo, Modality, MultimodalSample, TaskMode};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::Mea;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Graph;

/// Train, validation and test samples sharing one padding layout.
#[derive(Clone, Debug)]
pub struct Splits {
    pub info: DatasetInfo,
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[MultimodalSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

fn split_by_fraction(mut samples: Vec<MultimodalSample>, fractions: [f64; 3], seed: u64) -> [Vec<MultimodalSample>; 3] {
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n = samples.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).clamp(1, n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    [samples, val, test]
}

fn merge_info(a: DatasetInfo, b: DatasetInfo) -> Result<DatasetInfo> {
    if a.mode != b.mode || a.dims != b.dims {
        return Err(Error::Dataset(format!(
            "split manifests disagree: {:?}/{:?} vs {:?}/{:?}",
            a.mode, a.dims, b.mode, b.dims
        )));
    }
    let mut info = a;
    for m in 0..3 {
        info.max_lengths[m] = a.max_lengths[m].max(b.max_lengths[m]);
    }
    Ok(info)
}

/// Builds the splits described by the `[data]` section.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let samples = generate_synthetic(d.samples, d.seed, &cfg.gen)?;
            let [train, val, test] = split_by_fraction(samples, d.split, d.seed);
            Ok(Splits {
                info: cfg.gen.info(),
                train,
                val,
                test,
            })
        }
        DataSource::Manifest => {
            let main = load_dataset(d.manifest.as_deref().expect("validated"))?;
            match (&d.val_manifest, &d.test_manifest) {
                (None, None) => {
                    let [train, val, test] = split_by_fraction(main.samples, d.split, d.seed);
                    Ok(Splits {
                        info: main.info,
                        train,
                        val,
                        test,
                    })
                }
                (val_path, test_path) => {
                    let mut info = main.info;
                    let mut load = |p: &Option<PathBuf>| -> Result<Vec<MultimodalSample>> {
                        match p {
                            Some(p) => {
                                let ds = load_dataset(p)?;
                                info = merge_info(info, ds.info)?;
                                Ok(ds.samples)
                            }
                            None => Ok(Vec::new()),
                        }
                    };
                    let val = load(val_path)?;
                    let test = load(test_path)?;
                    Ok(Splits {
                        info,
                        train: main.samples,
                        val,
                        test,
                    })
                }
            }
        }
    }
}

/// Pooled representations of one sample set, row-aligned with `ids`.
#[derive(Clone, Debug, Default)]
pub struct Representations {
    pub exclusive: [Vec<Vec<f64>>; 3],
    pub agnostic: [Vec<Vec<f64>>; 3],
}

/// Outputs of a forward-only pass over a sample set.
#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub ids: Vec<String>,
    /// Head outputs, `output_dim` values per sample.
    pub outputs: Vec<f64>,
    pub reps: Representations,
    /// Last-layer modality weights ψ per sample, when the stack has them.
    pub psi: Vec<[f64; 3]>,
    /// Graph-fusion coefficients per sample: exclusive then agnostic, 3x3 each.
    pub xi: Vec<[Option<[f64; 9]>; 2]>,
}

fn rows(t: &crate::tensor::Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

/// Forward pass over `samples` in fixed order.
pub fn infer(
    model: &Mea,
    store: &ParamStore,
    samples: &[MultimodalSample],
    batch_size: usize,
    collect: bool,
) -> Result<Inference> {
    let mut out = Inference::default();
    for batch in make_batches(samples, &model.info, batch_size.max(2), 0, false)? {
        let mut g = Graph::with_params(store);
        let f = model.forward(&mut g, &batch)?;
        let pred = g.value(f.pred);
        if !pred.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                terms: format!("non-finite prediction in batch starting at `{}`", batch.ids[0]),
            });
        }
        out.outputs.extend_from_slice(pred.data());
        out.ids.extend(batch.ids.iter().cloned());
        if !collect {
            continue;
        }
        for m in 0..3 {
            out.reps.exclusive[m].extend(rows(g.value(f.he[m])));
            out.reps.agnostic[m].extend(rows(g.value(f.ha[m])));
        }
        if let Some(&last) = f.psi.last() {
            out.psi.extend(g.value(last).data().chunks(3).map(|r| [r[0], r[1], r[2]]));
        }
        let xi: [Option<Vec<[f64; 9]>>; 2] = f.xi.map(|x| {
            x.map(|v| {
                g.value(v)
                    .data()
                    .chunks(9)
                    .map(|r| r.try_into().expect("3x3 coefficients"))
                    .collect()
            })
        });
        for i in 0..batch.len() {
            out.xi.push([xi[0].as_ref().map(|v| v[i]), xi[1].as_ref().map(|v| v[i])]);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Mea,
    store: &ParamStore,
    samples: &[MultimodalSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    let inf = infer(model, store, samples, batch_size, false)?;
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&inf.outputs, &labels, model.info.mode)
}

/// Loss breakdown of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub epoch: usize,
    pub step: u64,
    pub task: f64,
    pub dis: f64,
    pub agn: f64,
    pub exc: f64,
    pub importance: f64,
    pub all: f64,
}

impl StepLosses {
    pub const HEADER: &'static str = "epoch,step,task,dis,agn,exc,importance,all";

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.task, self.dis, self.agn, self.exc, self.importance, self.all
        )
    }

    fn breakdown(&self) -> String {
        format!(
            "task={} dis={} agn={} exc={} importance={} all={}",
            self.task, self.dis, self.agn, self.exc, self.importance, self.all
        )
    }

    fn is_finite(&self) -> bool {
        [self.task, self.dis, self.agn, self.exc, self.importance, self.all]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

/// Result of a training run; `store` holds the selected checkpoint's values.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Mea,
    pub store: ParamStore,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub test: Option<MetricsReport>,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Vec<u8>,
}

struct Logs {
    losses: String,
    metrics: String,
}

/// Trains for `train.epochs` epochs and keeps the epoch with the best
/// validation score (training score when the validation split is empty).
/// With `out_dir`, writes `losses.csv`, `metrics.csv`, `config.toml` and
/// `checkpoint.bin` there.
pub fn train(cfg: &RunConfig, splits: &Splits, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, splits, out_dir, |_, _, _| Ok(()))
}

/// [`train`] with a callback run after every epoch's validation pass.
pub fn train_with(
    cfg: &RunConfig,
    splits: &Splits,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord, &Mea, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut store = ParamStore::new();
    let model = Mea::new(cfg, &splits.info, &mut store)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.train.lr,
        ..AdamConfig::default()
    });
    let selection: &[MultimodalSample] = if splits.val.is_empty() { &splits.train } else { &splits.val };
    let mode = splits.info.mode;
    let mut logs = Logs {
        losses: format!("{}\n", StepLosses::HEADER),
        metrics: format!("epoch,train_loss,{}\n", MetricsReport::csv_header(mode)),
    };
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, MetricsReport, Vec<u8>)> = None;
    let bs = cfg.train.batch_size;

    for epoch in 1..=cfg.train.epochs {
        let shuffle_seed = cfg.train.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let batches = make_batches(&splits.train, &splits.info, bs, shuffle_seed, true)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let step = adam.step + 1;
            let (rec, grads) = {
                let mut g = Graph::with_params(&store);
                let f = model.forward(&mut g, batch)?;
                let l = model.losses(&mut g, &f, batch)?;
                let v = |x| g.value(x).item();
                let rec = StepLosses {
                    epoch,
                    step,
                    task: v(l.terms.task),
                    dis: v(l.terms.dis),
                    agn: v(l.terms.agn),
                    exc: v(l.terms.exc),
                    importance: v(l.importance),
                    all: v(l.terms.all),
                };
                if !rec.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        terms: rec.breakdown(),
                    });
                }
                let grads = g.backward(l.objective)?;
                let owned: Vec<_> = grads.params().map(|(id, t)| (id, t.cloned())).collect();
                (rec, owned)
            };
            if let Some((id, _)) = grads.iter().find(|(_, t)| t.as_ref().is_some_and(|t| !t.is_finite())) {
                return Err(Error::Divergence {
                    step,
                    terms: format!("non-finite gradient for `{}`; {}", store.get(*id).name, rec.breakdown()),
                });
            }
            store.set_grads(grads.iter().map(|(id, t)| (*id, t.as_ref())));
            adam.step(&mut store);
            loss_sum += rec.all;
            let _ = writeln!(logs.losses, "{}", rec.csv());
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val = evaluate(&model, &store, selection, bs)?;
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, selection loss {:.4}",
            cfg.train.epochs,
            val.selection_loss()
        );
        let _ = writeln!(logs.metrics, "{epoch},{train_loss},{}", val.csv_row());
        let improved = best
            .as_ref()
            .is_none_or(|(_, b, _)| val.selection_loss() < b.selection_loss());
        if improved {
            best = Some((epoch, val.clone(), checkpoint::encode(&store, Some(&adam), cfg, &splits.info)?));
        }
        let record = EpochRecord { epoch, train_loss, val };
        on_epoch(&record, &model, &store)?;
        history.push(record);
    }

    let (best_epoch, best_val, bytes) = match best {
        Some(b) => b,
        None => {
            // zero epochs: the initial parameters are the checkpoint
            let bytes = checkpoint::encode(&store, Some(&adam), cfg, &splits.info)?;
            (0, evaluate(&model, &store, selection, bs)?, bytes)
        }
    };
    checkpoint::decode(&bytes)?.restore(&mut store, None)?;
    let test = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &store, &splits.test, bs)?)
    };
    if let Some(dir) = out_dir {
        let put = |name: &str, body: &[u8]| checkpoint::write(&dir.join(name), body);
        put("losses.csv", logs.losses.as_bytes())?;
        put("metrics.csv", logs.metrics.as_bytes())?;
        put("config.toml", cfg.to_toml().as_bytes())?;
        put("checkpoint.bin", &bytes)?;
        if let Some(t) = &test {
            put(
                "test_metrics.csv",
                format!("{}\n{}\n", MetricsReport::csv_header(mode), t.csv_row()).as_bytes(),
            )?;
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        best_epoch,
        best_val,
        test,
        history,
        checkpoint: bytes,
    })
}

/// Rebuilds a model from checkpoint bytes, rejecting architectures that
/// differ from `expected` when given.
pub fn load_model(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<(Mea, ParamStore)> {
    if let Some(cfg) = expected {
        let diff = crate::config::architecture_diff(&ck.config, cfg);
        if !diff.is_empty() {
            return Err(Error::Incompatible(diff));
        }
    }
    let mut store = ParamStore::new();
    let model = Mea::new(&ck.config, &ck.info, &mut store)?;
    ck.restore(&mut store, None)?;
    Ok((model, store))
}

/// `id,kind,modality,v0..` rows of pooled representations.
pub fn reps_csv(inf: &Inference) -> String {
    let width = inf.reps.exclusive[0].first().map_or(0, |r| r.len());
    let mut s = String::from("id,kind,modality");
    for j in 0..width {
        let _ = write!(s, ",v{j}");
    }
    s.push('\n');
    for (kind, sets) in [("exclusive", &inf.reps.exclusive), ("agnostic", &inf.reps.agnostic)] {
        for m in Modality::ALL {
            for (id, row) in inf.ids.iter().zip(&sets[m.index()]) {
                let _ = write!(s, "{id},{kind},{}", m.name());
                for v in row {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    s
}

/// `id,map,w0..` rows: last-layer ψ (3 values) and fusion coefficients (9 values).
pub fn attention_csv(inf: &Inference) -> String {
    let mut s = String::from("id,map,values\n");
    for (i, id) in inf.ids.iter().enumerate() {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        if let Some(p) = inf.psi.get(i) {
            let _ = writeln!(s, "{id},psi,{}", join(p));
        }
        if let Some([e, a]) = inf.xi.get(i) {
            if let Some(x) = e {
                let _ = writeln!(s, "{id},xi_exclusive,{}", join(x));
            }
            if let Some(x) = a {
                let _ = writeln!(s, "{id},xi_agnostic,{}", join(x));
            }
        }
    }
    s
}

/// Hyperparameters a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    Alpha,
    Beta,
    PsaLayers,
    HcaLayers,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mu" => Self::Mu,
            "alpha" => Self::Alpha,
            "beta" => Self::Beta,
            "psa_layers" => Self::PsaLayers,
            "hca_layers" => Self::HcaLayers,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{other}` (expected mu, alpha, beta, psa_layers or hca_layers)"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mu => "mu",
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::PsaLayers => "psa_layers",
            Self::HcaLayers => "hca_layers",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            Self::Mu => cfg.psa.mu = value,
            Self::Alpha => cfg.loss.alpha = value,
            Self::Beta => cfg.loss.beta = value,
            Self::PsaLayers => cfg.psa.layers = count()?,
            Self::HcaLayers => cfg.hca.layers = count()?,
        }
        cfg.validate()
    }
}

/// Header of the sweep CSV: the swept parameter and value, the selected
/// epoch, its validation selection loss, then the test metric columns.
pub fn sweep_header(mode: TaskMode) -> String {
    format!("param,value,best_epoch,val_loss,{}", MetricsReport::csv_header(mode))
}

/// One training per value with everything else fixed; returns the CSV text.
/// Each run writes its artifacts to `<out_dir>/<param>=<value>` when given.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], out_dir: Option<&Path>) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let splits = prepare_data(cfg)?;
    let mut csv = format!("{}\n", sweep_header(splits.info.mode));
    for &v in values {
        let mut run = cfg.clone();
        param.apply(&mut run, v)?;
        let dir = out_dir.map(|d| d.join(format!("{}={v}", param.name())));
        let outcome = train(&run, &splits, dir.as_deref())?;
        let test = match &outcome.test {
            Some(t) => t.csv_row(),
            None => evaluate(&outcome.model, &outcome.store, &splits.train, run.train.batch_size)?.csv_row(),
        };
        let _ = writeln!(
            csv,
            "{},{v},{},{},{test}",
            param.name(),
            outcome.best_epoch,
            outcome.best_val.selection_loss()
        );
    }
    if let Some(d) = out_dir {
        checkpoint::write(&d.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(csv)
}
