//! A small pre-norm transformer encoder with hand-written backpropagation.
//!
//! All parameters live in one flat f64 buffer behind a shape registry, which
//! keeps the optimizer, the finite-difference check and checkpointing simple
//! and deterministic.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::input::InputSequence;
use super::MentionEncoder;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XLETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint vocab hash mismatch: expected {expected}, found {found}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embeddings and transformer layers.
    Encoder,
    /// The type embedding matrix.
    TypeMatrix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub cap: usize,
    pub vocab_size: usize,
    pub num_types: usize,
}

impl ModelConfig {
    pub fn new(
        dim: usize,
        layers: usize,
        heads: usize,
        cap: usize,
        vocab_size: usize,
        num_types: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        Self {
            dim,
            layers,
            heads,
            ff_dim: 4 * dim,
            cap,
            vocab_size,
            num_types,
        }
    }

    /// Small configuration for unit tests.
    pub fn tiny(dim: usize, num_types: usize) -> Self {
        Self::new(dim, 1, 1, 16, crate::tokenizer::BASE_VOCAB as usize, num_types)
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
    group: ParamGroup,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    flat: Vec<f64>,
    vocab_hash: [u8; 32],
}

impl ModelParams {
    /// Registers every tensor and initializes weights from the seed: normal
    /// noise for matrices, ones for layer-norm gains, zeros for biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut params = Self {
            config: config.clone(),
            entries: Vec::new(),
            index: HashMap::new(),
            flat: Vec::new(),
            vocab_hash: [0; 32],
        };
        let d = config.dim;
        let ff = config.ff_dim;
        params.register("tok_emb", config.vocab_size, d, ParamGroup::Encoder);
        params.register("pos_emb", config.cap, d, ParamGroup::Encoder);
        params.register("seg_emb", 2, d, ParamGroup::Encoder);
        for l in 0..config.layers {
            for (suffix, rows, cols) in [
                ("ln1.g", 1, d),
                ("ln1.b", 1, d),
                ("wq", d, d),
                ("bq", 1, d),
                ("wk", d, d),
                ("bk", 1, d),
                ("wv", d, d),
                ("bv", 1, d),
                ("wo", d, d),
                ("bo", 1, d),
                ("ln2.g", 1, d),
                ("ln2.b", 1, d),
                ("w1", d, ff),
                ("b1", 1, ff),
                ("w2", ff, d),
                ("b2", 1, d),
            ] {
                params.register(&format!("layer{l}.{suffix}"), rows, cols, ParamGroup::Encoder);
            }
        }
        params.register("final_ln.g", 1, d, ParamGroup::Encoder);
        params.register("final_ln.b", 1, d, ParamGroup::Encoder);
        params.register("type_matrix", d, config.num_types, ParamGroup::TypeMatrix);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in params.entries.clone() {
            let slice = &mut params.flat[entry.offset..entry.offset + entry.rows * entry.cols];
            if entry.name.ends_with(".g") {
                slice.fill(1.0);
            } else if entry.name.ends_with(".b")
                || entry.name.ends_with("bq")
                || entry.name.ends_with("bk")
                || entry.name.ends_with("bv")
                || entry.name.ends_with("bo")
                || entry.name.ends_with("b1")
                || entry.name.ends_with("b2")
            {
                slice.fill(0.0);
            } else {
                for v in slice.iter_mut() {
                    *v = normal_sample(&mut rng) * INIT_STD;
                }
            }
        }
        params
    }

    fn register(&mut self, name: &str, rows: usize, cols: usize, group: ParamGroup) {
        let offset = self.flat.len();
        self.flat.extend(std::iter::repeat(0.0).take(rows * cols));
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            rows,
            cols,
            group,
        });
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.flat.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    /// Group of the parameter at a flat index.
    pub fn group_at(&self, flat_index: usize) -> ParamGroup {
        let entry = self
            .entries
            .iter()
            .rev()
            .find(|e| e.offset <= flat_index)
            .expect("index within flat buffer");
        entry.group
    }

    /// (name, flat range, group) for every registered tensor.
    pub fn entry_ranges(&self) -> Vec<(String, std::ops::Range<usize>, ParamGroup)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.offset..e.offset + e.rows * e.cols,
                    e.group,
                )
            })
            .collect()
    }

    fn view_mut<'a>(&self, flat: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
        let e = &self.entries[self.index[name]];
        ArrayViewMut2::from_shape(
            (e.rows, e.cols),
            &mut flat[e.offset..e.offset + e.rows * e.cols],
        )
        .expect("registered shape")
    }

    fn p(&self, name: &str) -> ArrayView2<'_, f64> {
        let e = &self.entries[self.index[name]];
        ArrayView2::from_shape(
            (e.rows, e.cols),
            &self.flat[e.offset..e.offset + e.rows * e.cols],
        )
        .expect("registered shape")
    }

    pub fn type_matrix(&self) -> ArrayView2<'_, f64> {
        self.p("type_matrix")
    }

    pub fn type_matrix_range(&self) -> std::ops::Range<usize> {
        let e = &self.entries[self.index["type_matrix"]];
        e.offset..e.offset + e.rows * e.cols
    }

    pub fn set_vocab_hash(&mut self, hash: [u8; 32]) {
        self.vocab_hash = hash;
    }

    pub fn vocab_hash(&self) -> [u8; 32] {
        self.vocab_hash
    }

    /// Full forward pass; returns the final hidden state at the CLS position
    /// together with the cache needed for backpropagation.
    pub fn forward(&self, x: &InputSequence) -> (Vec<f64>, EncoderCache) {
        let t = x.ids.len();
        assert!(t >= 1 && t <= self.config.cap, "sequence length {t} outside cap");
        let d = self.config.dim;

        let tok = self.p("tok_emb");
        let pos = self.p("pos_emb");
        let seg = self.p("seg_emb");
        let mut h = Array2::<f64>::zeros((t, d));
        for (i, (&id, &s)) in x.ids.iter().zip(&x.segments).enumerate() {
            for j in 0..d {
                h[[i, j]] = tok[[id as usize, j]] + pos[[i, j]] + seg[[s as usize, j]];
            }
        }

        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, cache) = self.layer_forward(l, &h);
            layers.push(cache);
            h = next;
        }
        let (y, final_ln) = layer_norm_forward(
            &h,
            &self.p("final_ln.g").row(0).to_owned(),
            &self.p("final_ln.b").row(0).to_owned(),
        );
        let h_cls = y.row(0).to_vec();
        (
            h_cls,
            EncoderCache {
                layers,
                pre_final: h,
                final_ln,
            },
        )
    }

    fn layer_forward(&self, l: usize, x: &Array2<f64>) -> (Array2<f64>, LayerCache) {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = |s: &str| format!("layer{l}.{s}");

        let (n1, ln1) = layer_norm_forward(
            x,
            &self.p(&n("ln1.g")).row(0).to_owned(),
            &self.p(&n("ln1.b")).row(0).to_owned(),
        );
        let q = n1.dot(&self.p(&n("wq"))) + &self.p(&n("bq")).row(0);
        let k = n1.dot(&self.p(&n("wk"))) + &self.p(&n("bk")).row(0);
        let v = n1.dot(&self.p(&n("wv"))) + &self.p(&n("bv")).row(0);

        let t = x.nrows();
        let mut concat = Array2::<f64>::zeros((t, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let a = softmax_rows(&scores);
            let oh = a.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols]).assign(&oh);
            attn.push(a);
        }
        let attn_out = concat.dot(&self.p(&n("wo"))) + &self.p(&n("bo")).row(0);
        let mid = x + &attn_out;

        let (n2, ln2) = layer_norm_forward(
            &mid,
            &self.p(&n("ln2.g")).row(0).to_owned(),
            &self.p(&n("ln2.b")).row(0).to_owned(),
        );
        let pre_act = n2.dot(&self.p(&n("w1"))) + &self.p(&n("b1")).row(0);
        let hid = pre_act.mapv(|v| v.max(0.0));
        let ff_out = hid.dot(&self.p(&n("w2"))) + &self.p(&n("b2")).row(0);
        let out = &mid + &ff_out;

        (
            out,
            LayerCache {
                x_in: x.clone(),
                ln1,
                n1,
                q,
                k,
                v,
                attn,
                concat,
                mid,
                ln2,
                n2,
                pre_act,
                hid,
            },
        )
    }

    /// Backpropagates the gradient of a scalar loss through the encoder.
    /// `d_hcls` is the gradient at the CLS output; parameter gradients are
    /// accumulated into `grads`, which must have `num_params` length.
    pub fn backward(
        &self,
        x: &InputSequence,
        cache: &EncoderCache,
        d_hcls: &[f64],
        grads: &mut [f64],
    ) {
        assert_eq!(grads.len(), self.flat.len());
        let t = x.ids.len();
        let d = self.config.dim;

        let mut dy = Array2::<f64>::zeros((t, d));
        for j in 0..d {
            dy[[0, j]] = d_hcls[j];
        }
        let mut dx = {
            let g = self.p("final_ln.g").row(0).to_owned();
            let (dx, dg, db) = layer_norm_backward(&cache.pre_final, &cache.final_ln, &g, &dy);
            add_row(&mut self.view_mut(grads, "final_ln.g"), &dg);
            add_row(&mut self.view_mut(grads, "final_ln.b"), &db);
            dx
        };

        for l in (0..self.config.layers).rev() {
            dx = self.layer_backward(l, &cache.layers[l], &dx, grads);
        }

        // Embedding scatter.
        let mut dtok = self.view_mut(grads, "tok_emb");
        for (i, &id) in x.ids.iter().enumerate() {
            for j in 0..d {
                dtok[[id as usize, j]] += dx[[i, j]];
            }
        }
        let mut dpos = self.view_mut(grads, "pos_emb");
        for i in 0..t {
            for j in 0..d {
                dpos[[i, j]] += dx[[i, j]];
            }
        }
        let mut dseg = self.view_mut(grads, "seg_emb");
        for (i, &s) in x.segments.iter().enumerate() {
            for j in 0..d {
                dseg[[s as usize, j]] += dx[[i, j]];
            }
        }
    }

    fn layer_backward(
        &self,
        l: usize,
        cache: &LayerCache,
        d_out: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = |s: &str| format!("layer{l}.{s}");

        // Feed-forward block.
        let d_ff_out = d_out;
        add_row(
            &mut self.view_mut(grads, &n("b2")),
            &d_ff_out.sum_axis(Axis(0)),
        );
        self.view_mut(grads, &n("w2"))
            .scaled_add(1.0, &cache.hid.t().dot(d_ff_out));
        let d_hid = d_ff_out.dot(&self.p(&n("w2")).t());
        let d_pre = ndarray::Zip::from(&d_hid)
            .and(&cache.pre_act)
            .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
        add_row(&mut self.view_mut(grads, &n("b1")), &d_pre.sum_axis(Axis(0)));
        self.view_mut(grads, &n("w1"))
            .scaled_add(1.0, &cache.n2.t().dot(&d_pre));
        let d_n2 = d_pre.dot(&self.p(&n("w1")).t());

        let mut d_mid = d_out.clone();
        {
            let g = self.p(&n("ln2.g")).row(0).to_owned();
            let (dx, dg, db) = layer_norm_backward(&cache.mid, &cache.ln2, &g, &d_n2);
            add_row(&mut self.view_mut(grads, &n("ln2.g")), &dg);
            add_row(&mut self.view_mut(grads, &n("ln2.b")), &db);
            d_mid += &dx;
        }

        // Attention block.
        let d_attn_out = &d_mid;
        add_row(
            &mut self.view_mut(grads, &n("bo")),
            &d_attn_out.sum_axis(Axis(0)),
        );
        self.view_mut(grads, &n("wo"))
            .scaled_add(1.0, &cache.concat.t().dot(d_attn_out));
        let d_concat = d_attn_out.dot(&self.p(&n("wo")).t());

        let t = cache.x_in.nrows();
        let mut dq = Array2::<f64>::zeros((t, d));
        let mut dk = Array2::<f64>::zeros((t, d));
        let mut dv = Array2::<f64>::zeros((t, d));
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let d_oh = d_concat.slice(ndarray::s![.., cols.clone()]);
            let a = &cache.attn[h];
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);

            let d_a = d_oh.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&a.t().dot(&d_oh));
            let d_scores = softmax_rows_backward(a, &d_a) * scale;
            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&d_scores.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols])
                .assign(&d_scores.t().dot(&qh));
        }

        add_row(&mut self.view_mut(grads, &n("bq")), &dq.sum_axis(Axis(0)));
        add_row(&mut self.view_mut(grads, &n("bk")), &dk.sum_axis(Axis(0)));
        add_row(&mut self.view_mut(grads, &n("bv")), &dv.sum_axis(Axis(0)));
        self.view_mut(grads, &n("wq"))
            .scaled_add(1.0, &cache.n1.t().dot(&dq));
        self.view_mut(grads, &n("wk"))
            .scaled_add(1.0, &cache.n1.t().dot(&dk));
        self.view_mut(grads, &n("wv"))
            .scaled_add(1.0, &cache.n1.t().dot(&dv));
        let d_n1 =
            dq.dot(&self.p(&n("wq")).t()) + dk.dot(&self.p(&n("wk")).t()) + dv.dot(&self.p(&n("wv")).t());

        let mut d_x = d_mid;
        {
            let g = self.p(&n("ln1.g")).row(0).to_owned();
            let (dx, dg, db) = layer_norm_backward(&cache.x_in, &cache.ln1, &g, &d_n1);
            add_row(&mut self.view_mut(grads, &n("ln1.g")), &dg);
            add_row(&mut self.view_mut(grads, &n("ln1.b")), &db);
            d_x += &dx;
        }
        d_x
    }

    /// Writes the versioned binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        let mut buf = Vec::with_capacity(64 + self.flat.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.config.dim,
            self.config.layers,
            self.config.heads,
            self.config.ff_dim,
            self.config.cap,
            self.config.vocab_size,
            self.config.num_types,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.vocab_hash);
        buf.extend_from_slice(&(self.flat.len() as u64).to_le_bytes());
        for v in &self.flat {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(io_err)
    }

    /// Loads a checkpoint, refusing a vocabulary hash that does not match
    /// `expected_vocab_hash` when one is supplied.
    pub fn load(path: &Path, expected_vocab_hash: Option<[u8; 32]>) -> Result<Self, ModelError> {
        let io_err = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let ck_err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cursor + n > bytes.len() {
                return Err(ck_err("truncated checkpoint".to_string()));
            }
            let s = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(ck_err("bad magic".to_string()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(format!(
                "expected version {CHECKPOINT_VERSION}, found {version}"
            )));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        let vocab_hash: [u8; 32] = take(32)?.try_into().unwrap();
        if let Some(expected) = expected_vocab_hash {
            if expected != vocab_hash {
                return Err(ModelError::VocabHashMismatch {
                    expected: hex::encode(expected),
                    found: hex::encode(vocab_hash),
                });
            }
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let config = ModelConfig {
            dim: dims[0],
            layers: dims[1],
            heads: dims[2],
            ff_dim: dims[3],
            cap: dims[4],
            vocab_size: dims[5],
            num_types: dims[6],
        };
        let mut params = Self::init(&config, 0);
        if params.flat.len() != count {
            return Err(ck_err(format!(
                "expected {} parameters, found {count}",
                params.flat.len()
            )));
        }
        for v in params.flat.iter_mut() {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        params.vocab_hash = vocab_hash;
        Ok(params)
    }
}

impl MentionEncoder for ModelParams {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, x: &InputSequence) -> Vec<f64> {
        self.forward(x).0
    }
}

pub struct EncoderCache {
    layers: Vec<LayerCache>,
    pre_final: Array2<f64>,
    final_ln: LayerNormCache,
}

impl EncoderCache {
    /// Sign pattern of every ReLU pre-activation. Finite differences are
    /// only trustworthy at parameter points where a perturbation leaves
    /// this pattern unchanged.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|c| c.pre_act.iter().map(|&v| v > 0.0))
            .collect()
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    ln1: LayerNormCache,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
    mid: Array2<f64>,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    pre_act: Array2<f64>,
    hid: Array2<f64>,
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm_forward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols();
    let mut xhat = Array2::<f64>::zeros(x.raw_dim());
    let mut inv_std = Array1::<f64>::zeros(x.nrows());
    let mut y = Array2::<f64>::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = s;
        for j in 0..d {
            let xh = (row[j] - mean) * s;
            xhat[[i, j]] = xh;
            y[[i, j]] = gain[j] * xh + bias[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    _x: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (t, d) = (dy.nrows(), dy.ncols());
    let mut dx = Array2::<f64>::zeros(dy.raw_dim());
    let mut dg = Array1::<f64>::zeros(d);
    let mut db = Array1::<f64>::zeros(d);
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.xhat[[i, j]];
            dg[j] += dy[[i, j]] * cache.xhat[[i, j]];
            db[j] += dy[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * gain[j];
            dx[[i, j]] =
                cache.inv_std[i] * (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    (dx, dg, db)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    for i in 0..a.nrows() {
        let dot: f64 = a.row(i).iter().zip(da.row(i)).map(|(x, y)| x * y).sum();
        for j in 0..a.ncols() {
            out[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
        }
    }
    out
}

fn add_row(target: &mut ArrayViewMut2<'_, f64>, addend: &Array1<f64>) {
    let mut row = target.row_mut(0);
    row += addend;
}

/// Box-Muller draw, deterministic under the seeded generator.
fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
