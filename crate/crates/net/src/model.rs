//! Width-reduced inflated Inception-V1 backbone, spatial max+average
//! pooling, a bidirectional LSTM and two sigmoid heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use embryo_core::sequence::FrameSequence;

use crate::error::{NetError, Result};
use crate::layers::{
    spatial_pool, spatial_pool_backward, Buffer, Logit, Lstm, LstmCache, MaxPool3d, Mixed, MixedCache, MixedChannels,
    Param, PoolCache, SpatialPoolCache, Tensor, Unit3d, UnitCache, Visit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Tiny,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Profile::Paper),
            "tiny" => Ok(Profile::Tiny),
            other => Err(format!("unknown profile `{other}` (expected paper or tiny)")),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub profile: Profile,
    pub width_multiplier: f64,
    pub lstm_units_per_direction: usize,
    pub dropout_rate: f64,
    pub input_frames: usize,
    pub input_side: usize,
    /// Spacing of the nominal frame grid, in hours.
    pub frame_spacing_hours: f64,
}

impl NetworkConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            width_multiplier: 0.25,
            lstm_units_per_direction: 128,
            dropout_rate: 0.25,
            input_frames: 128,
            input_side: 256,
            frame_spacing_hours: 1.0,
        }
    }

    /// Small test profile; not meant to reproduce anything.
    pub fn tiny() -> Self {
        Self {
            profile: Profile::Tiny,
            width_multiplier: 1.0 / 16.0,
            lstm_units_per_direction: 16,
            dropout_rate: 0.25,
            input_frames: 32,
            input_side: 64,
            frame_spacing_hours: 4.0,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width multiplier {} outside (0, 1]", self.width_multiplier));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.lstm_units_per_direction == 0 || self.input_frames == 0 || self.input_side == 0 {
            return bad("recurrent units, input frames and input side must be positive".into());
        }
        if !(self.frame_spacing_hours > 0.0) {
            return bad(format!("frame spacing {} must be positive", self.frame_spacing_hours));
        }
        for c in BASE_CHANNELS {
            self.scaled(c)?;
        }
        Ok(())
    }

    /// Channel count scaled by the width multiplier, rounded half up.
    pub fn scaled(&self, channels: usize) -> Result<usize> {
        let c = (channels as f64 * self.width_multiplier + 0.5).floor() as usize;
        if c == 0 {
            return Err(NetError::Config(format!(
                "width multiplier {} scales {channels} channels to 0",
                self.width_multiplier
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkOutput {
    pub fh_probability: f64,
    pub discard_probability: f64,
}

const STEM: [(&str, usize); 3] = [("Conv3d_1a_7x7", 64), ("Conv3d_2b_1x1", 64), ("Conv3d_2c_3x3", 192)];

const MIXED: [(&str, MixedChannels); 9] = [
    ("Mixed_3b", [64, 96, 128, 16, 32, 32]),
    ("Mixed_3c", [128, 128, 192, 32, 96, 64]),
    ("Mixed_4b", [192, 96, 208, 16, 48, 64]),
    ("Mixed_4c", [160, 112, 224, 24, 64, 64]),
    ("Mixed_4d", [128, 128, 256, 24, 64, 64]),
    ("Mixed_4e", [112, 144, 288, 32, 64, 64]),
    ("Mixed_4f", [256, 160, 320, 32, 128, 128]),
    ("Mixed_5b", [256, 160, 320, 32, 128, 128]),
    ("Mixed_5c", [384, 192, 384, 48, 128, 128]),
];

const BASE_CHANNELS: [usize; 13] = [64, 192, 96, 128, 16, 32, 112, 24, 144, 288, 160, 320, 48];

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Unit(Unit3d),
    Pool(MaxPool3d),
    Mixed(Box<Mixed>),
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    name: String,
    layer: Layer,
}

enum StageCache {
    Unit(UnitCache),
    Pool(PoolCache),
    Mixed(Box<MixedCache>),
}

impl Stage {
    fn out_shape(&self, d: [usize; 5]) -> [usize; 5] {
        match &self.layer {
            Layer::Unit(u) => u.out_shape(d),
            Layer::Pool(p) => p.out_shape(d),
            Layer::Mixed(m) => m.out_shape(d),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<StageCache>) {
        match &self.layer {
            Layer::Unit(u) => {
                let (y, c) = u.forward(x, train);
                (y, c.map(StageCache::Unit))
            }
            Layer::Pool(p) => {
                let (y, c) = p.forward(x, train);
                (y, c.map(StageCache::Pool))
            }
            Layer::Mixed(m) => {
                let (y, c) = m.forward(x, train);
                (y, c.map(|c| StageCache::Mixed(Box::new(c))))
            }
        }
    }

    fn backward(&mut self, cache: &StageCache, dy: Tensor) -> Option<Tensor> {
        match (&mut self.layer, cache) {
            (Layer::Unit(u), StageCache::Unit(c)) => u.backward(c, dy),
            (Layer::Pool(_), StageCache::Pool(c)) => Some(MaxPool3d::backward(c, &dy)),
            (Layer::Mixed(m), StageCache::Mixed(c)) => Some(m.backward(c, &dy)),
            _ => unreachable!("cache does not match its stage"),
        }
    }
}

/// Everything `backward` needs from one training forward pass.
pub struct Tape {
    stages: Vec<StageCache>,
    pool: SpatialPoolCache,
    sequence: Tensor,
    lstm_fwd: LstmCache,
    lstm_bwd: LstmCache,
    /// Head inputs after dropout, `[n, 2u]`.
    features: Vec<f64>,
    /// Inverted-dropout multipliers (0 or 1 / keep).
    dropout_scale: Vec<f64>,
    batch: usize,
}

/// Layer name and output shape `[n, t, h, w, c]`, or `[n, d]` for the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    stages: Vec<Stage>,
    lstm_fwd: Lstm,
    lstm_bwd: Lstm,
    head_fh: Logit,
    head_discard: Logit,
    dropout_rng: ChaCha8Rng,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Network {
    /// Builds a freshly initialized network; weights depend only on `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = |c: usize| config.scaled(c);
        let mut stages = Vec::new();
        let unit = |name: &str, cin: usize, cout: usize, k: [usize; 3], st: [usize; 3], rng: &mut ChaCha8Rng| Stage {
            name: name.to_owned(),
            layer: Layer::Unit(Unit3d::new(name, cin, cout, k, st, rng)),
        };
        let pool = |name: &str, k: [usize; 3], st: [usize; 3]| Stage {
            name: name.to_owned(),
            layer: Layer::Pool(MaxPool3d { kernel: k, stride: st }),
        };
        let c1 = s(STEM[0].1)?;
        let c2 = s(STEM[1].1)?;
        let c3 = s(STEM[2].1)?;
        let mut first = unit(STEM[0].0, 1, c1, [7, 7, 7], [2, 2, 2], &mut rng);
        if let Layer::Unit(u) = &mut first.layer {
            u.conv.needs_input_grad = false;
        }
        stages.push(first);
        stages.push(pool("MaxPool3d_2a_3x3", [1, 3, 3], [1, 2, 2]));
        stages.push(unit(STEM[1].0, c1, c2, [1, 1, 1], [1, 1, 1], &mut rng));
        stages.push(unit(STEM[2].0, c2, c3, [3, 3, 3], [1, 1, 1], &mut rng));
        stages.push(pool("MaxPool3d_3a_3x3", [1, 3, 3], [1, 2, 2]));
        let mut cin = c3;
        for (name, base) in MIXED {
            match name {
                "Mixed_4b" => stages.push(pool("MaxPool3d_4a_3x3", [3, 3, 3], [2, 2, 2])),
                "Mixed_5b" => stages.push(pool("MaxPool3d_5a_2x2", [2, 2, 2], [2, 2, 2])),
                _ => {}
            }
            let mut ch = [0; 6];
            for (c, b) in ch.iter_mut().zip(base) {
                *c = s(b)?;
            }
            stages.push(Stage {
                name: name.to_owned(),
                layer: Layer::Mixed(Box::new(Mixed::new(name, cin, ch, &mut rng))),
            });
            cin = ch[0] + ch[2] + ch[4] + ch[5];
        }
        let u = config.lstm_units_per_direction;
        let lstm_fwd = Lstm::new("bidirectional/forward_lstm", 2 * cin, u, false, &mut rng);
        let lstm_bwd = Lstm::new("bidirectional/backward_lstm", 2 * cin, u, true, &mut rng);
        let head_fh = Logit::new("fh", 2 * u, &mut rng);
        let head_discard = Logit::new("discard", 2 * u, &mut rng);
        Ok(Self {
            config: config.clone(),
            stages,
            lstm_fwd,
            lstm_bwd,
            head_fh,
            head_discard,
            dropout_rng: ChaCha8Rng::seed_from_u64(rng.gen()),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        let c = &self.config;
        [batch, c.input_frames, c.input_side, c.input_side, 1]
    }

    /// Output shape after every backbone layer, the pooling, the recurrent
    /// layer and the heads, for a batch of one.
    pub fn shape_trace(&self) -> Vec<ShapeEntry> {
        let mut d = self.input_shape(1);
        let mut out = vec![ShapeEntry {
            name: "input".into(),
            shape: d.to_vec(),
        }];
        for s in &self.stages {
            d = s.out_shape(d);
            out.push(ShapeEntry {
                name: s.name.clone(),
                shape: d.to_vec(),
            });
        }
        let u = self.config.lstm_units_per_direction;
        out.push(ShapeEntry {
            name: "spatial_max_avg_pool".into(),
            shape: vec![1, d[1], 2 * d[4]],
        });
        out.push(ShapeEntry {
            name: "bidirectional".into(),
            shape: vec![1, 2 * u],
        });
        for name in ["fh", "discard"] {
            out.push(ShapeEntry {
                name: name.into(),
                shape: vec![1, 1],
            });
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            match &mut s.layer {
                Layer::Unit(u) => u.params(f),
                Layer::Mixed(m) => m.params(f),
                Layer::Pool(_) => {}
            }
        }
        self.lstm_fwd.params(f);
        self.lstm_bwd.params(f);
        self.head_fh.params(f);
        self.head_discard.params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for s in &mut self.stages {
            match &mut s.layer {
                Layer::Unit(u) => u.buffers(f),
                Layer::Mixed(m) => m.buffers(f),
                Layer::Pool(_) => {}
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    /// Stacks sequences into `[n, frames, side, side, 1]`, scaled to `[0, 1]`.
    pub fn input_tensor(&self, batch: &[FrameSequence]) -> Result<Tensor> {
        let shape = self.input_shape(batch.len());
        let per = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(batch.len() * per);
        for seq in batch {
            if seq.len() != shape[1] || seq.side != shape[2] {
                return Err(NetError::Shape {
                    got: vec![seq.len(), seq.side, seq.side, 1],
                    expected: shape[1..].to_vec(),
                });
            }
            data.extend(seq.data.iter().map(|&v| v as f64 / 255.0));
        }
        Ok(Tensor::from_vec(&shape, data))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.input_shape(x.shape.first().copied().unwrap_or(0));
        if x.shape != expected || expected[0] == 0 {
            return Err(NetError::Shape {
                got: x.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Evaluation-mode forward pass: running statistics, no dropout.
    pub fn predict(&self, batch: &[FrameSequence]) -> Result<Vec<NetworkOutput>> {
        self.predict_tensor(&self.input_tensor(batch)?)
    }

    pub fn predict_tensor(&self, x: &Tensor) -> Result<Vec<NetworkOutput>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h, false).0;
        }
        let (seq, _) = spatial_pool(&h);
        let features = self.recurrent(&seq).0;
        Ok(self.heads(&features))
    }

    /// `[n, 2u]`: forward final state then backward final state.
    fn recurrent(&self, seq: &Tensor) -> (Vec<f64>, LstmCache, LstmCache) {
        let n = seq.shape[0];
        let u = self.config.lstm_units_per_direction;
        let (hf, cf) = self.lstm_fwd.forward(seq);
        let (hb, cb) = self.lstm_bwd.forward(seq);
        let mut out = Vec::with_capacity(n * 2 * u);
        for i in 0..n {
            out.extend_from_slice(&hf[i * u..(i + 1) * u]);
            out.extend_from_slice(&hb[i * u..(i + 1) * u]);
        }
        (out, cf, cb)
    }

    fn heads(&self, features: &[f64]) -> Vec<NetworkOutput> {
        self.logits(features)
            .into_iter()
            .map(|(a, b)| NetworkOutput {
                fh_probability: sigmoid(a),
                discard_probability: sigmoid(b),
            })
            .collect()
    }

    fn logits(&self, features: &[f64]) -> Vec<(f64, f64)> {
        self.head_fh
            .forward(features)
            .into_iter()
            .zip(self.head_discard.forward(features))
            .collect()
    }

    /// Training-mode forward pass (batch statistics, dropout). Returns the
    /// head logits `(fh, discard)` per example and the tape for `backward`.
    /// Parameters and running statistics are left untouched.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Vec<(f64, f64)>, Tape)> {
        self.check_input(x)?;
        let n = x.shape[0];
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for s in &self.stages {
            let (y, c) = s.forward(&h, true);
            caches.push(c.expect("training caches"));
            h = y;
        }
        let (seq, pool) = spatial_pool(&h);
        drop(h);
        let (mut features, lstm_fwd, lstm_bwd) = self.recurrent(&seq);
        let rate = self.config.dropout_rate;
        let dropout_scale: Vec<f64> = if rate > 0.0 {
            features
                .iter()
                .map(|_| if self.dropout_rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                .collect()
        } else {
            vec![1.0; features.len()]
        };
        features.iter_mut().zip(&dropout_scale).for_each(|(f, s)| *f *= s);
        let logits = self.logits(&features);
        Ok((
            logits,
            Tape {
                stages: caches,
                pool,
                sequence: seq,
                lstm_fwd,
                lstm_bwd,
                features,
                dropout_scale,
                batch: n,
            },
        ))
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// the two logits, and folds the batch statistics into the running
    /// averages.
    pub fn backward(&mut self, tape: Tape, d_fh: &[f64], d_discard: &[f64]) {
        let n = tape.batch;
        assert!(d_fh.len() == n && d_discard.len() == n, "one logit gradient per example");
        let u = self.config.lstm_units_per_direction;
        let mut dfeat = vec![0.0; n * 2 * u];
        self.head_fh.backward(&tape.features, d_fh, &mut dfeat);
        self.head_discard.backward(&tape.features, d_discard, &mut dfeat);
        dfeat.iter_mut().zip(&tape.dropout_scale).for_each(|(g, s)| *g *= s);
        let mut dh_f = Vec::with_capacity(n * u);
        let mut dh_b = Vec::with_capacity(n * u);
        for row in dfeat.chunks_exact(2 * u) {
            dh_f.extend_from_slice(&row[..u]);
            dh_b.extend_from_slice(&row[u..]);
        }
        let mut dseq = Tensor::zeros(&tape.sequence.shape);
        self.lstm_fwd.backward(&tape.sequence, &tape.lstm_fwd, &dh_f, &mut dseq);
        self.lstm_bwd.backward(&tape.sequence, &tape.lstm_bwd, &dh_b, &mut dseq);
        let mut g = Some(spatial_pool_backward(&tape.pool, &dseq));
        for (stage, cache) in self.stages.iter_mut().zip(&tape.stages).rev() {
            let dy = g.take().expect("input gradient below the first layer");
            g = stage.backward(cache, dy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_rounding() {
        let c = NetworkConfig::tiny();
        assert_eq!(c.scaled(16).unwrap(), 1);
        assert_eq!(c.scaled(24).unwrap(), 2);
        assert_eq!(c.scaled(8).unwrap(), 1);
        let mut bad = NetworkConfig::tiny();
        bad.width_multiplier = 1.0 / 64.0;
        assert!(bad.validate().is_err());
        assert!(Network::build(&bad, 0).is_err());
        bad.width_multiplier = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_emits_two_probabilities() {
        let net = Network::build(&NetworkConfig::tiny(), 1).unwrap();
        let seq = FrameSequence::zeros("e", vec![0.0; 32], 64);
        let out = net.predict(&[seq]).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].fh_probability > 0.0 && out[0].fh_probability < 1.0);
        assert!(out[0].discard_probability > 0.0 && out[0].discard_probability < 1.0);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let net = Network::build(&NetworkConfig::tiny(), 1).unwrap();
        let seq = FrameSequence::zeros("e", vec![0.0; 31], 64);
        assert!(matches!(net.predict(&[seq]), Err(NetError::Shape { .. })));
        assert!(net.predict_tensor(&Tensor::zeros(&[1, 32, 64, 64, 2])).is_err());
    }
}
