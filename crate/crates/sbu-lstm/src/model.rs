//! Assembly of the layer stack: bidirectional first layer, optional middle
//! recurrent layers, unidirectional last layer, and a dense projection when
//! the last hidden width differs from the output width.
//!
//! The prediction is the last layer's output at the final timestep, so the
//! final input step must be observed. A baseline mode relaxes the
//! first-bidirectional/last-unidirectional constraint so pure N-layer stacks
//! can be trained for comparison.
//!
//! # Checkpoint format
//!
//! A checkpoint file is:
//!
//! ```text
//! bytes 0..4   magic "SBUL"
//! bytes 4..8   format version, u32 little-endian (currently 1)
//! bytes 8..12  header length H, u32 little-endian
//! bytes 12..12+H  header, UTF-8 JSON: { "spec", "norm_stats", "metadata",
//!                 "arrays": [ { "name", "len" }, ... ] }
//! remainder    the arrays' f64 values, little-endian, concatenated in
//!              header order
//! ```
//!
//! Array names follow the parameter store order, e.g. `layer0.fwd.w_f`,
//! `layer1.b_c`, `projection.w`. Loading verifies magic, version, names and
//! lengths against the spec before accepting any value, so a failed load
//! never yields a partial model.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::LstmCellParams;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::{
    bdlstm_layer_backward, bdlstm_layer_forward, dense_backward, dense_forward,
    lstm_layer_backward, lstm_layer_forward, BdLayerCache, BdLayerParams, DenseParams,
    LstmLayerCache, MergeMode, SeqInput,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBUL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Bdlstm,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub hidden: usize,
    /// Merge mode for bidirectional layers; ignored for unidirectional ones.
    #[serde(default = "default_merge")]
    pub merge: MergeMode,
}

fn default_merge() -> MergeMode {
    MergeMode::Concat
}

impl LayerSpec {
    pub fn bdlstm(hidden: usize, merge: MergeMode) -> Self {
        LayerSpec { kind: LayerKind::Bdlstm, hidden, merge }
    }

    pub fn lstm(hidden: usize) -> Self {
        LayerSpec { kind: LayerKind::Lstm, hidden, merge: default_merge() }
    }

    fn output_width(&self) -> usize {
        match self.kind {
            LayerKind::Bdlstm => self.merge.output_width(self.hidden, self.hidden),
            LayerKind::Lstm => self.hidden,
        }
    }
}

/// Architecture description: input/output widths, window length, the ordered
/// layer stack, and the initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-step feature width (locations x channels).
    pub input_width: usize,
    /// Window length n.
    pub time_lags: usize,
    pub layers: Vec<LayerSpec>,
    /// Prediction width (number of locations).
    pub output_width: usize,
    pub seed: u64,
    /// Whether the model accepts inputs with missing timesteps.
    #[serde(default)]
    pub use_mask: bool,
    /// Relaxes the bidirectional-first / unidirectional-last constraint so
    /// pure N-layer LSTM or BDLSTM stacks can be built for comparison.
    #[serde(default)]
    pub baseline: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 {
            return Err(Error::Config("input and output widths must be >= 1".into()));
        }
        if self.time_lags == 0 {
            return Err(Error::Config("time_lags must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layer stack is empty".into()));
        }
        if self.layers.iter().any(|l| l.hidden == 0) {
            return Err(Error::Config("layer hidden sizes must be >= 1".into()));
        }
        if !self.baseline {
            if self.layers.len() < 2 {
                return Err(Error::Config(
                    "stack needs at least a bidirectional first layer and a unidirectional last layer \
                     (set baseline = true for single-layer stacks)"
                        .into(),
                ));
            }
            if self.layers.first().unwrap().kind != LayerKind::Bdlstm {
                return Err(Error::Config("first layer must be bidirectional".into()));
            }
            if self.layers.last().unwrap().kind != LayerKind::Lstm {
                return Err(Error::Config("last layer must be unidirectional".into()));
            }
        }
        Ok(())
    }

    /// Input width of each layer in order.
    pub fn layer_input_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.layers.len());
        let mut w = self.input_width;
        for layer in &self.layers {
            widths.push(w);
            w = layer.output_width();
        }
        widths
    }

    pub fn last_layer_output_width(&self) -> usize {
        self.layers.last().map(|l| l.output_width()).unwrap_or(0)
    }

    /// A projection is appended exactly when the last layer's output width
    /// differs from the prediction width.
    pub fn needs_projection(&self) -> bool {
        self.last_layer_output_width() != self.output_width
    }
}

/// Parameters of one stack layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Bd(BdLayerParams),
    Lstm(LstmCellParams),
}

/// The full parameter store. Gradients use the same type and buffer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    pub projection: Option<DenseParams>,
}

pub type ModelGrads = ParamSet;

impl ParamSet {
    fn for_each_buffer<'a>(&'a self, mut f: impl FnMut(&'a [f64])) {
        for layer in &self.layers {
            match layer {
                LayerParams::Bd(bd) => {
                    for buf in bd.fwd.buffers() {
                        f(buf);
                    }
                    for buf in bd.bwd.buffers() {
                        f(buf);
                    }
                }
                LayerParams::Lstm(cell) => {
                    for buf in cell.buffers() {
                        f(buf);
                    }
                }
            }
        }
        if let Some(proj) = &self.projection {
            f(proj.w.data());
            f(&proj.b);
        }
    }

    fn for_each_buffer_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            match layer {
                LayerParams::Bd(bd) => {
                    for buf in bd.fwd.buffers_mut() {
                        f(buf);
                    }
                    for buf in bd.bwd.buffers_mut() {
                        f(buf);
                    }
                }
                LayerParams::Lstm(cell) => {
                    for buf in cell.buffers_mut() {
                        f(buf);
                    }
                }
            }
        }
        if let Some(proj) = &mut self.projection {
            f(proj.w.data_mut());
            f(&mut proj.b);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_buffer(|b| n += b.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_buffer(|b| out.extend_from_slice(b));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_buffer_mut(|b| {
            b.copy_from_slice(&flat[offset..offset + b.len()]);
            offset += b.len();
        });
        assert_eq!(offset, flat.len(), "assign_flat: {} values for {} parameters", flat.len(), offset);
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        z.for_each_buffer_mut(|b| b.fill(0.0));
        z
    }

    pub fn accumulate(&mut self, other: &ParamSet) {
        let theirs = other.flatten();
        let mut offset = 0;
        self.for_each_buffer_mut(|b| {
            crate::linalg::add_assign(b, &theirs[offset..offset + b.len()]);
            offset += b.len();
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_buffer_mut(|b| {
            for v in b.iter_mut() {
                *v *= factor;
            }
        });
    }

    /// Names and lengths of the parameter arrays in store order.
    pub fn array_layout(&self) -> Vec<(String, usize)> {
        const CELL_FIELDS: [&str; 12] = [
            "w_f", "w_i", "w_o", "w_c", "u_f", "u_i", "u_o", "u_c", "b_f", "b_i", "b_o", "b_c",
        ];
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Bd(bd) => {
                    for (name, buf) in CELL_FIELDS.iter().zip(bd.fwd.buffers()) {
                        out.push((format!("layer{idx}.fwd.{name}"), buf.len()));
                    }
                    for (name, buf) in CELL_FIELDS.iter().zip(bd.bwd.buffers()) {
                        out.push((format!("layer{idx}.bwd.{name}"), buf.len()));
                    }
                }
                LayerParams::Lstm(cell) => {
                    for (name, buf) in CELL_FIELDS.iter().zip(cell.buffers()) {
                        out.push((format!("layer{idx}.{name}"), buf.len()));
                    }
                }
            }
        }
        if let Some(proj) = &self.projection {
            out.push(("projection.w".into(), proj.w.data().len()));
            out.push(("projection.b".into(), proj.b.len()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

/// Per-layer forward caches for one sample.
pub enum LayerCache {
    Bd(BdLayerCache),
    Lstm(LstmLayerCache),
}

pub struct ModelCache {
    pub layer_caches: Vec<LayerCache>,
    /// Last-step output of the final recurrent layer (the projection input).
    pub h_last: Vec<f64>,
    pub steps: usize,
}

fn glorot_init(mat: &mut crate::linalg::Mat, rng: &mut impl Rng) {
    let s = (6.0 / (mat.rows() + mat.cols()) as f64).sqrt();
    for v in mat.data_mut().iter_mut() {
        *v = rng.gen_range(-s..=s);
    }
}

fn init_cell(input: usize, hidden: usize, rng: &mut impl Rng) -> LstmCellParams {
    let mut cell = LstmCellParams::zeros(input, hidden);
    glorot_init(&mut cell.w_f, rng);
    glorot_init(&mut cell.w_i, rng);
    glorot_init(&mut cell.w_o, rng);
    glorot_init(&mut cell.w_c, rng);
    glorot_init(&mut cell.u_f, rng);
    glorot_init(&mut cell.u_i, rng);
    glorot_init(&mut cell.u_o, rng);
    glorot_init(&mut cell.u_c, rng);
    // Forget-gate bias 1 keeps early memory alive under short training budgets.
    cell.b_f.fill(1.0);
    cell
}

/// Builds and initializes a model: Glorot-uniform weights, zero biases except
/// forget-gate biases at 1, all drawn from a ChaCha stream seeded by
/// `spec.seed`.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let widths = spec.layer_input_widths();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer_spec, &input) in spec.layers.iter().zip(&widths) {
        match layer_spec.kind {
            LayerKind::Bdlstm => {
                let fwd = init_cell(input, layer_spec.hidden, &mut rng);
                let bwd = init_cell(input, layer_spec.hidden, &mut rng);
                layers.push(LayerParams::Bd(BdLayerParams { fwd, bwd, merge: layer_spec.merge }));
            }
            LayerKind::Lstm => {
                layers.push(LayerParams::Lstm(init_cell(input, layer_spec.hidden, &mut rng)));
            }
        }
    }
    let projection = if spec.needs_projection() {
        let input = spec.last_layer_output_width();
        let mut proj = DenseParams::zeros(input, spec.output_width);
        glorot_init(&mut proj.w, &mut rng);
        Some(proj)
    } else {
        None
    };
    Ok(Model { spec: spec.clone(), params: ParamSet { layers, projection } })
}

/// Runs one sample through the stack; the prediction is the final layer's
/// last-step output, projected if a projection exists.
pub fn model_forward(model: &Model, input: &SeqInput) -> Result<(Vec<f64>, ModelCache)> {
    let spec = &model.spec;
    if input.len() != spec.time_lags {
        return Err(Error::Config(format!(
            "input has {} steps, model expects {}",
            input.len(),
            spec.time_lags
        )));
    }
    if input.width() != spec.input_width {
        return Err(Error::Config(format!(
            "input step width {} does not match model input width {}",
            input.width(),
            spec.input_width
        )));
    }
    if !spec.use_mask && input.mask.iter().any(|&m| !m) {
        return Err(Error::Config(
            "input contains missing steps but the model was built without the masking layer".into(),
        ));
    }
    if !input.mask.last().copied().unwrap_or(false) {
        return Err(Error::LastStepMasked);
    }

    let mut seq = input.clone();
    let mut layer_caches = Vec::with_capacity(model.params.layers.len());
    for layer in &model.params.layers {
        let (out, cache) = match layer {
            LayerParams::Bd(bd) => {
                let (out, cache) = bdlstm_layer_forward(bd, &seq);
                (out, LayerCache::Bd(cache))
            }
            LayerParams::Lstm(cell) => {
                let (out, cache) = lstm_layer_forward(cell, &seq);
                (out, LayerCache::Lstm(cache))
            }
        };
        layer_caches.push(cache);
        seq = out;
    }

    let h_last = seq.steps.last().unwrap().clone();
    let prediction = match &model.params.projection {
        Some(proj) => dense_forward(proj, &h_last),
        None => h_last.clone(),
    };
    Ok((prediction, ModelCache { layer_caches, h_last, steps: spec.time_lags }))
}

/// Whole-stack backward pass; `loss_grad` is dL/dprediction.
pub fn model_backward(model: &Model, cache: &ModelCache, loss_grad: &[f64]) -> ModelGrads {
    assert_eq!(
        loss_grad.len(),
        model.spec.output_width,
        "model_backward: loss gradient length {} vs output width {}",
        loss_grad.len(),
        model.spec.output_width
    );
    assert_eq!(
        cache.layer_caches.len(),
        model.params.layers.len(),
        "model_backward: stale cache ({} layers cached, model has {})",
        cache.layer_caches.len(),
        model.params.layers.len()
    );

    let mut grads = model.params.zeros_like();

    let dh_last = match (&model.params.projection, &mut grads.projection) {
        (Some(proj), Some(proj_grads)) => {
            let (g, dh) = dense_backward(proj, &cache.h_last, loss_grad);
            *proj_grads = g;
            dh
        }
        (None, None) => loss_grad.to_vec(),
        _ => unreachable!("grads mirror params"),
    };

    // Only the final timestep feeds the loss.
    let n = cache.steps;
    let mut upstream: Vec<Vec<f64>> = Vec::with_capacity(n);
    let last_width = dh_last.len();
    for t in 0..n {
        if t + 1 == n {
            upstream.push(dh_last.clone());
        } else {
            upstream.push(vec![0.0; last_width]);
        }
    }

    for (idx, layer) in model.params.layers.iter().enumerate().rev() {
        let input_grads = match (layer, &cache.layer_caches[idx], &mut grads.layers[idx]) {
            (LayerParams::Bd(bd), LayerCache::Bd(bd_cache), LayerParams::Bd(bd_grads)) => {
                let (fwd_g, bwd_g, input_grads) = bdlstm_layer_backward(bd, bd_cache, &upstream);
                bd_grads.fwd = fwd_g;
                bd_grads.bwd = bwd_g;
                input_grads
            }
            (LayerParams::Lstm(cell), LayerCache::Lstm(cell_cache), LayerParams::Lstm(cell_grads)) => {
                let (g, input_grads) = lstm_layer_backward(cell, cell_cache, &upstream);
                *cell_grads = g;
                input_grads
            }
            _ => panic!("model_backward: cache kind does not match layer {idx}"),
        };
        upstream = input_grads;
    }
    grads
}

/// Rewires location indexing by a permutation: input-weight columns of the
/// first layer and output rows (plus bias) of the projection. With
/// `features_per_location > 1` whole per-location feature blocks move
/// together. Requires a projection, since hidden layers carry no location
/// indexing to permute.
pub fn permute_locations(model: &Model, perm: &[usize], features_per_location: usize) -> Result<Model> {
    let locations = model.spec.output_width;
    if perm.len() != locations {
        return Err(Error::Config(format!(
            "permutation length {} does not match {} locations",
            perm.len(),
            locations
        )));
    }
    if model.spec.input_width != locations * features_per_location {
        return Err(Error::Config(format!(
            "input width {} is not locations ({locations}) x features ({features_per_location})",
            model.spec.input_width
        )));
    }
    let Some(proj) = &model.params.projection else {
        return Err(Error::Config(
            "permutation rewiring needs a projection layer (last hidden width must differ from \
             the output width)"
                .into(),
        ));
    };

    let mut permuted = model.clone();

    // Column permutation of the first layer's input weights: new column of
    // location perm[p] is the old column of location p.
    let permute_cols = |m: &crate::linalg::Mat| -> crate::linalg::Mat {
        crate::linalg::Mat::from_fn(m.rows(), m.cols(), |i, j| {
            let loc = j / features_per_location;
            let feat = j % features_per_location;
            m.get(i, loc_inverse(perm, loc) * features_per_location + feat)
        })
    };

    match &mut permuted.params.layers[0] {
        LayerParams::Bd(bd) => {
            for cell in [&mut bd.fwd, &mut bd.bwd] {
                cell.w_f = permute_cols(&cell.w_f);
                cell.w_i = permute_cols(&cell.w_i);
                cell.w_o = permute_cols(&cell.w_o);
                cell.w_c = permute_cols(&cell.w_c);
            }
        }
        LayerParams::Lstm(cell) => {
            cell.w_f = permute_cols(&cell.w_f);
            cell.w_i = permute_cols(&cell.w_i);
            cell.w_o = permute_cols(&cell.w_o);
            cell.w_c = permute_cols(&cell.w_c);
        }
    }

    let new_proj = DenseParams {
        w: crate::linalg::Mat::from_fn(proj.w.rows(), proj.w.cols(), |i, j| {
            proj.w.get(loc_inverse(perm, i), j)
        }),
        b: (0..proj.b.len()).map(|i| proj.b[loc_inverse(perm, i)]).collect(),
    };
    permuted.params.projection = Some(new_proj);
    Ok(permuted)
}

fn loc_inverse(perm: &[usize], target: usize) -> usize {
    perm.iter().position(|&p| p == target).expect("not a permutation")
}

/// Permutes a sample's per-step location blocks by `perm`.
pub fn permute_input(input: &SeqInput, perm: &[usize], features_per_location: usize) -> SeqInput {
    let steps = input
        .steps
        .iter()
        .map(|step| {
            let mut out = vec![0.0; step.len()];
            for (p, &target) in perm.iter().enumerate() {
                for f in 0..features_per_location {
                    out[target * features_per_location + f] = step[p * features_per_location + f];
                }
            }
            out
        })
        .collect();
    SeqInput { steps, mask: input.mask.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub validation_mse: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    norm_stats: Option<NormStats>,
    metadata: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

pub fn save_checkpoint(
    model: &Model,
    norm_stats: Option<&NormStats>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let layout = model.params.array_layout();
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        norm_stats: norm_stats.cloned(),
        metadata: meta.clone(),
        arrays: layout.iter().map(|(name, len)| ArrayEntry { name: name.clone(), len: *len }).collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in model.params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<NormStats>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    // Rebuild the expected layout from the spec and verify the header agrees
    // before touching any payload value.
    let mut model = build_model(&header.spec)?;
    let expected = model.params.array_layout();
    if expected.len() != header.arrays.len() {
        return Err(Error::Checkpoint(format!(
            "array count mismatch: file has {}, spec implies {}",
            header.arrays.len(),
            expected.len()
        )));
    }
    for ((name, len), entry) in expected.iter().zip(&header.arrays) {
        if name != &entry.name || *len != entry.len {
            return Err(Error::Checkpoint(format!(
                "array mismatch: file has {} (len {}), spec implies {} (len {})",
                entry.name, entry.len, name, len
            )));
        }
    }

    let total: usize = expected.iter().map(|(_, len)| len).sum();
    let payload = &bytes[12 + header_len..];
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {} ({} f64 values)",
            payload.len(),
            total * 8,
            total
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.params.assign_flat(&values);
    Ok((model, header.norm_stats, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sbu_spec(input: usize, n: usize, hidden: usize, output: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_width: input,
            time_lags: n,
            layers: vec![LayerSpec::bdlstm(hidden, MergeMode::Concat), LayerSpec::lstm(hidden)],
            output_width: output,
            seed,
            use_mask: true,
            baseline: false,
        }
    }

    fn random_input(n: usize, width: usize, seed: u64) -> SeqInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqInput::observed(
            (0..n).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        )
    }

    #[test]
    fn projection_present_iff_widths_differ() {
        let spec = sbu_spec(4, 3, 4, 4, 1);
        let model = build_model(&spec).unwrap();
        assert!(model.params.projection.is_none());

        let spec = sbu_spec(4, 3, 2, 4, 1);
        let model = build_model(&spec).unwrap();
        let proj = model.params.projection.as_ref().unwrap();
        assert_eq!((proj.w.rows(), proj.w.cols()), (4, 2));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = sbu_spec(3, 4, 5, 3, 99);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = sbu_spec(3, 4, 5, 3, 0);
        spec.layers = vec![LayerSpec::lstm(5), LayerSpec::lstm(5)];
        assert!(matches!(build_model(&spec), Err(Error::Config(_))));

        let mut spec = sbu_spec(3, 4, 5, 3, 0);
        spec.layers[0].hidden = 0;
        assert!(matches!(build_model(&spec), Err(Error::Config(_))));

        // Baseline mode relaxes the first/last constraint.
        let mut spec = sbu_spec(3, 4, 5, 3, 0);
        spec.layers = vec![LayerSpec::lstm(5)];
        spec.baseline = true;
        assert!(build_model(&spec).is_ok());
    }

    #[test]
    fn forward_output_width_is_output_width() {
        for hidden in [2usize, 3, 7] {
            let spec = sbu_spec(3, 4, hidden, 3, 5);
            let model = build_model(&spec).unwrap();
            let (pred, _) = model_forward(&model, &random_input(4, 3, 1)).unwrap();
            assert_eq!(pred.len(), 3);
        }
        // Depth does not change the contract.
        let mut spec = sbu_spec(3, 4, 4, 3, 5);
        spec.layers.insert(1, LayerSpec::bdlstm(5, MergeMode::Sum));
        let model = build_model(&spec).unwrap();
        let (pred, _) = model_forward(&model, &random_input(4, 3, 2)).unwrap();
        assert_eq!(pred.len(), 3);
    }

    #[test]
    fn masked_last_step_is_an_error() {
        let spec = sbu_spec(2, 3, 2, 2, 1);
        let model = build_model(&spec).unwrap();
        let mut input = random_input(3, 2, 3);
        input.mask[2] = false;
        assert!(matches!(model_forward(&model, &input), Err(Error::LastStepMasked)));
    }

    #[test]
    fn zero_loss_grad_gives_zero_grads() {
        let spec = sbu_spec(2, 3, 2, 2, 4);
        let model = build_model(&spec).unwrap();
        let (_, cache) = model_forward(&model, &random_input(3, 2, 5)).unwrap();
        let grads = model_backward(&model, &cache, &[0.0, 0.0]);
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_direction_actually_trains() {
        let spec = sbu_spec(3, 4, 3, 3, 6);
        let model = build_model(&spec).unwrap();
        let (pred, cache) = model_forward(&model, &random_input(4, 3, 7)).unwrap();
        let grads = model_backward(&model, &cache, &vec![1.0; pred.len()]);
        let LayerParams::Bd(bd) = &grads.layers[0] else { panic!("first layer is bidirectional") };
        let max_bwd = bd.bwd.buffers().iter().flat_map(|b| b.iter()).fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_bwd > 0.0, "backward-direction gradients are all zero");
    }

    #[test]
    fn permutation_equivariance_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = sbu_spec(4, 5, 3, 4, 8); // hidden 3 != P 4 -> projection
        let model = build_model(&spec).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let input = random_input(5, 4, rng.gen());
            let permuted_model = permute_locations(&model, &perm, 1).unwrap();
            let permuted_input = permute_input(&input, &perm, 1);
            let (pred, _) = model_forward(&model, &input).unwrap();
            let (pred_perm, _) = model_forward(&permuted_model, &permuted_input).unwrap();
            for (p, &target) in perm.iter().enumerate() {
                assert!((pred[p] - pred_perm[target]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = sbu_spec(3, 4, 2, 3, 12);
        let model = build_model(&spec).unwrap();
        save_checkpoint(&model, None, &CheckpointMeta::default(), &path).unwrap();
        let (loaded, stats, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.flatten(), model.params.flatten());
        assert!(stats.is_none());
        for seed in 0..100u64 {
            let input = random_input(4, 3, seed);
            let (a, _) = model_forward(&model, &input).unwrap();
            let (b, _) = model_forward(&loaded, &input).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tampered_checkpoint_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&sbu_spec(3, 4, 2, 3, 12)).unwrap();
        save_checkpoint(&model, None, &CheckpointMeta::default(), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bogus version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
