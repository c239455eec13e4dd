//! Small PointNet classifier whose penultimate activations feed FPD, KPD and APC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objects::PointSet;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Binding, Checkpoint, Grads, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const FEATURE_WIDTH: usize = 64;
const HIDDEN: [usize; 2] = [32, 64];

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Result<Self> {
        // He initialization for the ReLU stack
        let std = (2.0 / din as f64).sqrt();
        let w: Vec<f32> = (0..din * dout).map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
        Ok(Self {
            w: store.add(format!("{name}.w"), Tensor::from_rows(din, dout, w)?)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![1, dout]))?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<Var> {
        tape.conv1x1(x, p.var(self.w), p.var(self.b))
    }
}

/// Shared per-point projection, max-pool, then a dense feature layer and a logit head.
#[derive(Debug, Clone)]
pub struct PointNet {
    channels: usize,
    classes: usize,
    params: ParamStore,
    layers: [Dense; 4],
}

impl PointNet {
    pub fn new(channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if !(channels == 3 || channels == 4) || classes == 0 {
            return Err(Error::Config(format!("PointNet with {channels} channels and {classes} classes")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = [
            Dense::new(&mut params, &mut rng, "conv1", channels, HIDDEN[0])?,
            Dense::new(&mut params, &mut rng, "conv2", HIDDEN[0], HIDDEN[1])?,
            Dense::new(&mut params, &mut rng, "fc", HIDDEN[1], FEATURE_WIDTH)?,
            Dense::new(&mut params, &mut rng, "head", FEATURE_WIDTH, classes)?,
        ];
        Ok(Self { channels, classes, params, layers })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input(&self, ps: &PointSet) -> Result<Tensor<f32>> {
        if ps.is_empty() {
            return Err(Error::Domain("feature extraction of an empty object".into()));
        }
        let data = ps.points.iter().flat_map(|p| p.to_array()[..self.channels].to_vec()).map(|v| v as f32).collect();
        Tensor::from_rows(ps.len(), self.channels, data)
    }

    /// Returns `(features [1 x 64], logits [1 x K])`.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Binding, x: Var) -> Result<(Var, Var)> {
        let [c1, c2, fc, head] = &self.layers;
        let h = c1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = c2.forward(tape, p, h)?;
        let h = tape.relu(h);
        let g = tape.max_rows(h, None)?;
        let f = fc.forward(tape, p, g)?;
        let f = tape.relu(f);
        let logits = head.forward(tape, p, f)?;
        Ok((f, logits))
    }

    fn eval(&self, ps: &PointSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(self.input(ps)?);
        let (f, l) = self.forward(&mut tape, &p, x)?;
        Ok((tape.value(f).to_f64_vec(), tape.value(l).to_f64_vec()))
    }

    pub fn features(&self, ps: &PointSet) -> Result<Vec<f64>> {
        Ok(self.eval(ps)?.0)
    }

    /// Highest-logit class; ties go to the lowest index.
    pub fn predict(&self, ps: &PointSet) -> Result<usize> {
        let logits = self.eval(ps)?.1;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    fn sample_grads(&self, ps: &PointSet, label: usize, scale: f64) -> Result<(f64, Grads)> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, true);
        let x = tape.constant(self.input(ps)?);
        let (_, logits) = self.forward(&mut tape, &p, x)?;
        let ce = tape.cross_entropy(logits, &[label])?;
        let loss = tape.scale(ce, scale);
        tape.backward(loss)?;
        Ok((tape.value(ce).data()[0] as f64, p.grads(&tape, &self.params)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 32, lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractorHeader {
    classes: Vec<String>,
    feature_width: usize,
    hidden: [usize; 2],
}

/// A pair of classifiers over the same classes: one on xyz, one on xyz plus intensity.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub classes: Vec<String>,
    net3: PointNet,
    net4: PointNet,
}

impl FeatureExtractor {
    pub fn net(&self, channels: usize) -> Result<&PointNet> {
        match channels {
            3 => Ok(&self.net3),
            4 => Ok(&self.net4),
            c => Err(Error::Contract(format!("feature extractor has no {c}-channel network"))),
        }
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Label(format!("class {name:?} unknown to the feature extractor {:?}", self.classes)))
    }

    /// Feature rows for every object, computed in parallel.
    pub fn features(&self, sets: &[PointSet], channels: usize) -> Result<Vec<Vec<f64>>> {
        let net = self.net(channels)?;
        sets.par_iter().map(|s| net.features(s)).collect()
    }

    pub fn accuracy(&self, sets: &[PointSet], labels: &[usize], channels: usize) -> Result<f64> {
        if sets.len() != labels.len() || sets.is_empty() {
            return Err(Error::Contract(format!("{} objects against {} labels", sets.len(), labels.len())));
        }
        let net = self.net(channels)?;
        let hits: Vec<bool> = sets.par_iter().zip(labels).map(|(s, &l)| Ok(net.predict(s)? == l)).collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / sets.len() as f64)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let header = ExtractorHeader { classes: self.classes.clone(), feature_width: FEATURE_WIDTH, hidden: HIDDEN };
        let mut tensors = Vec::new();
        for (prefix, net) in [("ch3", &self.net3), ("ch4", &self.net4)] {
            tensors.extend(net.params.iter().map(|(n, t)| (format!("{prefix}.{n}"), t.clone())));
        }
        Ok(Checkpoint { config: serde_json::to_value(header)?, meta, tensors })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: ExtractorHeader = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("not a feature-extractor checkpoint: {e}")))?;
        if header.feature_width != FEATURE_WIDTH || header.hidden != HIDDEN {
            return Err(Error::Config(format!("unsupported extractor layout {:?}/{}", header.hidden, header.feature_width)));
        }
        let k = header.classes.len();
        let mut nets = [PointNet::new(3, k, 0)?, PointNet::new(4, k, 0)?];
        for (prefix, net) in ["ch3.", "ch4."].iter().zip(nets.iter_mut()) {
            let entries = ck.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t)));
            net.params.load(entries)?;
        }
        let [net3, net4] = nets;
        Ok(Self { classes: header.classes, net3, net4 })
    }
}

fn train_net(net: &mut PointNet, data: &[(PointSet, usize)], cfg: &ExtractorTrainConfig, stream: u64) -> Result<()> {
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let results: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|&j| net.sample_grads(&data[j].0, data[j].1, scale))
            .collect::<Result<_>>()?;
        let mut grads = Grads::zeros(&net.params);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            grads.add_assign(g);
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!("extractor loss diverged at step {step}")));
        }
        adam.update(&mut net.params, &grads)?;
        if step % 100 == 0 {
            log::debug!("extractor {}ch step {step} loss {loss:.4}", net.channels);
        }
    }
    Ok(())
}

/// Trains the 3- and 4-channel classifiers on labelled real objects.
pub fn train_feature_extractor(
    data: &[(PointSet, usize)],
    classes: Vec<String>,
    cfg: &ExtractorTrainConfig,
) -> Result<FeatureExtractor> {
    if data.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("extractor training needs data, steps and a batch size".into()));
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l >= classes.len()) {
        return Err(Error::Label(format!("label {l} outside {} classes", classes.len())));
    }
    let mut net3 = PointNet::new(3, classes.len(), cfg.seed)?;
    let mut net4 = PointNet::new(4, classes.len(), cfg.seed.wrapping_add(1))?;
    train_net(&mut net3, data, cfg, 3)?;
    train_net(&mut net4, data, cfg, 4)?;
    Ok(FeatureExtractor { classes, net3, net4 })
}

/// Fraction of generated objects classified as the class they were conditioned on.
pub fn apc(extractor: &FeatureExtractor, gen: &[PointSet], labels: &[String], channels: usize) -> Result<f64> {
    let ids = labels.iter().map(|l| extractor.class_index(l)).collect::<Result<Vec<_>>>()?;
    extractor.accuracy(gen, &ids, channels)
}
