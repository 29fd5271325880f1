use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::text::TextEmbedding;
use super::{Denoiser, Trainable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Group,
    /// No normalization before the adaptive scale and shift. Keeps every
    /// layer local in time.
    None,
}

/// Shape of the temporal UNet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// `F`; the network reads `2F` channels and writes `F`.
    pub feature_width: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub groups: usize,
    pub embedding_width: usize,
    pub text_width: usize,
    pub kernel_size: usize,
    pub res_blocks: usize,
    /// Longest clip the network accepts, before internal padding.
    pub max_frames: usize,
    #[serde(default)]
    pub normalization: Normalization,
    /// Whether training revealed keyframes through the mask channels.
    pub mask_conditioned: bool,
}

impl DenoiserConfig {
    pub fn paper(feature_width: usize) -> Self {
        Self {
            feature_width,
            base_channels: 512,
            channel_multipliers: vec![2, 2, 2, 2],
            groups: 32,
            embedding_width: 512,
            text_width: 512,
            kernel_size: 5,
            res_blocks: 2,
            max_frames: 196,
            normalization: Normalization::Group,
            mask_conditioned: true,
        }
    }

    pub fn desk(feature_width: usize) -> Self {
        Self {
            feature_width,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            groups: 8,
            embedding_width: 128,
            text_width: super::text::DEFAULT_TEXT_WIDTH,
            kernel_size: 5,
            res_blocks: 2,
            max_frames: 64,
            normalization: Normalization::Group,
            mask_conditioned: true,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Internal time length: `frames` rounded up to the downsampling factor.
    pub fn padded_frames(&self, frames: usize) -> usize {
        let f = 1 << (self.levels() - 1);
        frames.div_ceil(f) * f
    }

    fn level_channels(&self) -> Vec<usize> {
        std::iter::once(self.base_channels)
            .chain(self.channel_multipliers.iter().map(|m| m * self.base_channels))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.feature_width == 0 || self.text_width == 0 || self.embedding_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be nonempty and positive".into());
        }
        if self.groups == 0 || self.level_channels().iter().any(|c| c % self.groups != 0) {
            return bad(format!("every level width must divide into {} groups", self.groups));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.res_blocks == 0 || self.max_frames == 0 {
            return bad("res_blocks and max_frames must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("base channels must be even for the sinusoidal embedding".into());
        }
        Ok(())
    }

    /// Input frames on either side of a frame that can influence its output
    /// when normalization is off.
    pub fn receptive_radius(&self) -> usize {
        let half = (self.kernel_size - 1) / 2;
        let levels = self.levels();
        let mut r = half; // input convolution
        for l in 0..levels {
            let scale = 1 << l;
            r += 2 * self.res_blocks * half * scale;
            if l + 1 < levels {
                r += half * scale;
            }
        }
        r += 4 * half * (1 << (levels - 1)); // middle blocks
        for l in (0..levels).rev() {
            let scale = 1 << l;
            r += 2 * (self.res_blocks + 1) * half * scale;
            if l > 0 {
                r += scale / 2 + half * (scale / 2);
            }
        }
        r + half
    }
}

/// `[sin(t·ω_i), cos(t·ω_i)]` with `ω_i = 10000^(−i/(d/2))`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone)]
struct ResIds {
    conv1: (ParamId, ParamId),
    emb: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
    cout: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    text: (ParamId, ParamId),
    null_text: ParamId,
    conv_in: (ParamId, ParamId),
    down: Vec<Vec<ResIds>>,
    downsample: Vec<(ParamId, ParamId)>,
    mid: Vec<ResIds>,
    up: Vec<Vec<ResIds>>,
    upsample: Vec<(ParamId, ParamId)>,
    conv_out: (ParamId, ParamId),
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    k: usize,
    emb: usize,
}

impl<T: Scalar> Builder<'_, T> {
    fn dense(&mut self, name: &str, fan_in: usize, rows: usize, out: usize, gain: f64) -> (ParamId, ParamId) {
        let w = self.store.insert_normal(format!("{name}.w"), (rows, out), gain / (fan_in as f64).sqrt(), &mut self.rng);
        let b = self.store.insert_zeros(format!("{name}.b"), (1, out));
        (w, b)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (ParamId, ParamId) {
        self.dense(name, k * cin, k * cin, cout, 1.0)
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResIds {
        let k = self.k;
        ResIds {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, k),
            emb: self.dense(&format!("{name}.emb"), self.emb, self.emb, 2 * cout, 0.1),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, k),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
            cout,
        }
    }
}

/// 1D temporal UNet with adaptive group normalization.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    ids: Ids,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = Self::build(&config, &mut params, seed);
        Ok(Self { config, params, ids })
    }

    /// Rebuilds a network around existing parameters, which must match the
    /// config's names and shapes.
    pub fn with_parameters(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        fresh.params.check_layout(&params)?;
        Ok(Self { params, ..fresh })
    }

    fn build(c: &DenoiserConfig, store: &mut ParamStore<T>, seed: u64) -> Ids {
        let mut b = Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: c.kernel_size,
            emb: c.embedding_width,
        };
        let e = c.embedding_width;
        let time1 = b.dense("time.0", c.base_channels, c.base_channels, e, 1.0);
        let time2 = b.dense("time.1", e, e, e, 1.0);
        let text = b.dense("text", c.text_width, c.text_width, e, 1.0);
        let null_text = b
            .store
            .insert_normal("text.null", (1, c.text_width), 1.0 / (c.text_width as f64).sqrt(), &mut b.rng);
        let conv_in = b.conv("conv_in", 2 * c.feature_width, c.base_channels, c.kernel_size);
        let ch = c.level_channels();
        let levels = c.levels();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..levels {
            let mut blocks = Vec::new();
            for r in 0..c.res_blocks {
                let cin = if r == 0 { ch[l] } else { ch[l + 1] };
                blocks.push(b.res(&format!("down.{l}.{r}"), cin, ch[l + 1]));
            }
            down.push(blocks);
            if l + 1 < levels {
                downsample.push(b.conv(&format!("down.{l}.sample"), ch[l + 1], ch[l + 1], c.kernel_size));
            }
        }
        let mid = (0..2).map(|r| b.res(&format!("mid.{r}"), ch[levels], ch[levels])).collect();
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut carried = ch[levels];
        for l in (0..levels).rev() {
            let mut blocks = Vec::new();
            for r in 0..=c.res_blocks {
                let cin = if r == 0 { carried + ch[l + 1] } else { ch[l + 1] };
                blocks.push(b.res(&format!("up.{l}.{r}"), cin, ch[l + 1]));
            }
            up.push(blocks);
            carried = ch[l + 1];
            if l > 0 {
                upsample.push(b.conv(&format!("up.{l}.sample"), carried, carried, c.kernel_size));
            }
        }
        let conv_out = b.dense("conv_out", c.kernel_size * ch[1], c.kernel_size * ch[1], c.feature_width, 0.1);
        Ids {
            time1,
            time2,
            text,
            null_text,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            conv_out,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn check_input(&self, input: &Array2<T>, text: &TextEmbedding<T>) -> Result<()> {
        let c = &self.config;
        if input.ncols() != 2 * c.feature_width {
            return Err(Error::Shape(format!("input has {} columns, expected {}", input.ncols(), 2 * c.feature_width)));
        }
        if input.nrows() == 0 || input.nrows() > c.max_frames {
            return Err(Error::Shape(format!("{} frames outside 1..={}", input.nrows(), c.max_frames)));
        }
        if text.width() != c.text_width {
            return Err(Error::Shape(format!("text width {} vs {}", text.width(), c.text_width)));
        }
        if let Some(pos) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / input.ncols(), col: pos % input.ncols() });
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        match self.config.normalization {
            Normalization::Group => tape.group_norm(x, self.config.groups),
            Normalization::None => x,
        }
    }

    fn res_block(&self, tape: &mut Tape<'_, T>, x: Var, emb: Var, ids: &ResIds) -> Var {
        let k = self.config.kernel_size;
        let h = self.norm(tape, x);
        let h = tape.silu(h);
        let h = tape.conv1d(h, ids.conv1.0, ids.conv1.1, k, 1);
        let ss = tape.linear(emb, ids.emb.0, ids.emb.1);
        let scale = tape.slice_cols(ss, 0, ids.cout);
        let shift = tape.slice_cols(ss, ids.cout, 2 * ids.cout);
        let h = self.norm(tape, h);
        let h = tape.scale_shift(h, scale, shift);
        let h = tape.silu(h);
        let h = tape.conv1d(h, ids.conv2.0, ids.conv2.1, k, 1);
        let skip = match ids.skip {
            Some((w, b)) => tape.conv1d(x, w, b, 1, 1),
            None => x,
        };
        tape.add(h, skip)
    }

    /// Records the forward pass; returns `(input, output)` handles.
    pub fn forward_on<'p>(&'p self, tape: &mut Tape<'p, T>, input: &Array2<T>, t: usize, text: &TextEmbedding<T>, input_grad: bool) -> Result<(Var, Var)> {
        self.check_input(input, text)?;
        let c = &self.config;
        let ids = &self.ids;
        let n = input.nrows();
        let x_in = tape.input(input.clone(), input_grad);

        let tf = timestep_features(t, c.base_channels).into_iter().map(T::lit).collect();
        let tf = tape.input(Array2::from_shape_vec((1, c.base_channels), tf).expect("row"), false);
        let e = tape.linear(tf, ids.time1.0, ids.time1.1);
        let e = tape.silu(e);
        let e = tape.linear(e, ids.time2.0, ids.time2.1);
        let txt = if text.is_null() {
            tape.param(ids.null_text)
        } else {
            tape.input(text.vector().clone(), false)
        };
        let txt = tape.linear(txt, ids.text.0, ids.text.1);
        let emb = tape.add(e, txt);
        let emb = tape.silu(emb);

        let padded = c.padded_frames(n);
        let mut h = if padded != n { tape.pad_rows(x_in, padded) } else { x_in };
        h = tape.conv1d(h, ids.conv_in.0, ids.conv_in.1, c.kernel_size, 1);
        let mut skips = Vec::new();
        for (l, blocks) in ids.down.iter().enumerate() {
            for r in blocks {
                h = self.res_block(tape, h, emb, r);
            }
            skips.push(h);
            if let Some(&(w, b)) = ids.downsample.get(l) {
                h = tape.conv1d(h, w, b, c.kernel_size, 2);
            }
        }
        for r in &ids.mid {
            h = self.res_block(tape, h, emb, r);
        }
        for (i, blocks) in ids.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_cols(h, skip);
            for r in blocks {
                h = self.res_block(tape, h, emb, r);
            }
            if let Some(&(w, b)) = ids.upsample.get(i) {
                h = tape.upsample2(h);
                h = tape.conv1d(h, w, b, c.kernel_size, 1);
            }
        }
        h = self.norm(tape, h);
        h = tape.silu(h);
        h = tape.conv1d(h, ids.conv_out.0, ids.conv_out.1, c.kernel_size, 1);
        if padded != n {
            h = tape.slice_rows(h, 0, n);
        }
        if let Some(pos) = tape.value(h).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / c.feature_width, col: pos % c.feature_width });
        }
        Ok((x_in, h))
    }
}

impl<T: Scalar> Denoiser<T> for UNet<T> {
    fn feature_width(&self) -> usize {
        self.config.feature_width
    }

    fn text_width(&self) -> usize {
        self.config.text_width
    }

    fn max_frames(&self) -> usize {
        self.config.max_frames
    }

    fn mask_conditioned(&self) -> bool {
        self.config.mask_conditioned
    }

    fn predict(&self, input: &Array2<T>, t: usize, text: &TextEmbedding<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new(&self.params, false);
        let (_, out) = self.forward_on(&mut tape, input, t, text, false)?;
        Ok(tape.value(out).clone())
    }

    fn predict_vjp(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let mut tape = Tape::new(&self.params, false);
        let (x, out) = self.forward_on(&mut tape, input, t, text, true)?;
        let y = tape.value(out).clone();
        let seed = upstream(&y);
        let mut g = tape.backward(out, seed, None);
        let gx = g.take(x).unwrap_or_else(|| Array2::zeros(input.dim()));
        Ok((y, gx))
    }
}

impl<T: Scalar> Trainable<T> for UNet<T> {
    fn parameters(&self) -> &ParamStore<T> {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn backward_params(
        &self,
        input: &Array2<T>,
        t: usize,
        text: &TextEmbedding<T>,
        upstream: &mut dyn FnMut(&Array2<T>) -> Array2<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new(&self.params, true);
        let (_, out) = self.forward_on(&mut tape, input, t, text, false)?;
        let y = tape.value(out).clone();
        let seed = upstream(&y);
        tape.backward(out, seed, Some(grads));
        Ok(y)
    }
}
