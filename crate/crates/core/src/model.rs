//! The MD-Net graph: a shared four-level encoder and three cross-fed
//! decoder paths (W = whole tumor, C = tumor core, E = enhancing tumor).
//!
//! Every named block matches the reference layout:
//! `EncBlk-0…3`, `EncDwn-1…3`, and per path `{W,C,E}-DecCat/DecSae/DecBlk-2…0`
//! plus `{W,C,E}-Output`. A "Blk" is two rounds of
//! (3³ conv → batch norm → leaky ReLU → squeeze-excitation); a "DecCat" is a
//! channel concatenation (with 2× trilinear upsampling feeding the W path);
//! a "DecSae" is a lone squeeze-excitation block on the concatenated
//! features. Outputs are 1×1×1 convolutions with sigmoids.
//!
//! Each decoder is a U-Net-style ladder: level ℓ concatenates the 2×
//! upsampled deeper block of its own path with the `EncBlk-ℓ` skip. The C
//! path additionally concatenates the cross-fed `W-DecBlk-ℓ`, and the E
//! path the cross-fed `C-DecBlk-ℓ`, so W constrains C and C constrains E
//! while information still flows down every path. The alternative
//! `e_path_wide` wiring concatenates `C-DecCat-2` with `C-DecBlk-2` at the
//! deepest decoder level (240 channels instead of 192).

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Real;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub levels: usize,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    /// Full-scale input extent `[D, H, W]`; forward accepts any extent
    /// divisible by `2^(levels−1)`.
    pub input_shape: [usize; 3],
    /// Alternative deepest E-level wiring: concat(C-DecCat-2, C-DecBlk-2)
    /// giving 240 channels instead of the default 192.
    pub e_path_wide: bool,
    pub bn_eps: f64,
    /// Fraction of the running statistic kept per batch-norm update.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 12,
            base_filters: 12,
            levels: 4,
            leaky_slope: 0.01,
            se_reduction: 4,
            input_shape: [160, 192, 128],
            e_path_wide: false,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters != self.in_channels {
            return Err(Error::InvalidConfig(format!(
                "base_filters {} must equal in_channels {}",
                self.base_filters, self.in_channels
            )));
        }
        if self.levels < 2 {
            return Err(Error::InvalidConfig("levels must be at least 2".into()));
        }
        if self.se_reduction < 1 {
            return Err(Error::InvalidReduction);
        }
        if self.leaky_slope < 0.0 || self.bn_momentum < 0.0 || self.bn_momentum >= 1.0 {
            return Err(Error::InvalidConfig(
                "leaky_slope / bn_momentum out of range".into(),
            ));
        }
        Ok(())
    }

    /// Filters at encoder level `ℓ`: base doubled per level.
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial extent must divide by this for the pooling ladder to work.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(4)
    }
}

/// One named parameter tensor. Conv kernels (`is_kernel`) are the only
/// tensors subject to L2 weight decay.
pub struct ParamDef<T: Real> {
    pub name: String,
    pub value: ArrayD<T>,
    pub is_kernel: bool,
}

/// Result of one forward pass: the tape (for backward), node ids for every
/// named block, and the three sigmoid outputs `[whole, core, enhancing]`.
pub struct Forward<T: Real> {
    pub tape: Tape<T>,
    pub named: Vec<(String, NodeId)>,
    pub outputs: [NodeId; 3],
}

impl<T: Real> Forward<T> {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }
}

pub struct MdNet<T: Real> {
    pub config: ModelConfig,
    params: Vec<ParamDef<T>>,
    index: BTreeMap<String, usize>,
    /// Batch-norm running statistics, keyed `"{block}.bn{j}.{mean|var}"`.
    buffers: BTreeMap<String, Array1<T>>,
}

const DECODER_PATHS: [&str; 3] = ["W", "C", "E"];

impl<T: Real> MdNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self {
            config,
            params: Vec::new(),
            index: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let cfg = net.config.clone();
        let top = cfg.levels - 1;

        // Encoder.
        let mut enc_ch = Vec::new();
        for l in 0..cfg.levels {
            let ci = if l == 0 { cfg.in_channels } else { cfg.filters(l - 1) };
            net.register_block(&format!("EncBlk-{l}"), ci, cfg.filters(l), &mut rng);
            enc_ch.push(cfg.filters(l));
        }

        // Decoder channel arithmetic shared by shape_trace.
        for path in DECODER_PATHS {
            for l in (0..top).rev() {
                let cat_ch = net.config.cat_channels(path, l);
                net.register_se(&format!("{path}-DecSae-{l}"), cat_ch, &mut rng);
                net.register_block(
                    &format!("{path}-DecBlk-{l}"),
                    cat_ch,
                    cfg.filters(l),
                    &mut rng,
                );
            }
            net.register_conv(
                &format!("{path}-Output.conv"),
                cfg.filters(0),
                1,
                1,
                &mut rng,
            );
        }
        Ok(net)
    }

    // ---- parameter registration ----

    fn register(&mut self, name: &str, value: ArrayD<T>, is_kernel: bool) {
        let idx = self.params.len();
        self.params.push(ParamDef {
            name: name.to_string(),
            value,
            is_kernel,
        });
        self.index.insert(name.to_string(), idx);
    }

    fn register_conv(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let fan_in = ci * kernel * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[co, fan_in]), |_| {
            T::from_f64_c(gaussian(rng) * std)
        });
        self.register(&format!("{name}.weight"), w, true);
        self.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[co])), false);
    }

    fn register_bn(&mut self, name: &str, c: usize) {
        self.register(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), T::one()), false);
        self.register(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), false);
        self.buffers.insert(format!("{name}.mean"), Array1::zeros(c));
        self.buffers.insert(format!("{name}.var"), Array1::from_elem(c, T::one()));
    }

    fn register_se(&mut self, name: &str, c: usize, rng: &mut ChaCha8Rng) {
        let hidden = self.config.se_hidden(c);
        let std1 = (2.0 / c as f64).sqrt();
        let w1 = ArrayD::from_shape_fn(IxDyn(&[hidden, c]), |_| {
            T::from_f64_c(gaussian(rng) * std1)
        });
        self.register(&format!("{name}.fc1.weight"), w1, false);
        // Small positive bias keeps the bottleneck ReLU units live at init.
        self.register(
            &format!("{name}.fc1.bias"),
            ArrayD::from_elem(IxDyn(&[hidden]), T::from_f64_c(0.1)),
            false,
        );
        let std2 = (2.0 / hidden as f64).sqrt();
        let w2 = ArrayD::from_shape_fn(IxDyn(&[c, hidden]), |_| {
            T::from_f64_c(gaussian(rng) * std2)
        });
        self.register(&format!("{name}.fc2.weight"), w2, false);
        self.register(&format!("{name}.fc2.bias"), ArrayD::zeros(IxDyn(&[c])), false);
    }

    fn register_block(&mut self, name: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng) {
        for j in 1..=2 {
            let cin = if j == 1 { ci } else { co };
            self.register_conv(&format!("{name}.conv{j}"), cin, co, 3, rng);
            self.register_bn(&format!("{name}.bn{j}"), co);
            self.register_se(&format!("{name}.se{j}"), co, rng);
        }
    }

    // ---- accessors ----

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[ParamDef<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamDef<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Zeroes every parameter whose name starts with `prefix`
    /// (e.g. `"E-"` disables the enhancing decoder path).
    pub fn zero_params_with_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.fill(T::zero());
                n += 1;
            }
        }
        n
    }

    // ---- forward ----

    pub fn forward_eval(&self, input: &Array4<T>) -> Result<Forward<T>> {
        let (fwd, updates) = self.forward_inner(input, false)?;
        debug_assert!(updates.is_empty());
        Ok(fwd)
    }

    /// Training-mode forward: batch statistics are used for normalization
    /// and folded into the running buffers.
    pub fn forward_train(&mut self, input: &Array4<T>) -> Result<Forward<T>> {
        let (fwd, updates) = self.forward_inner(input, true)?;
        let m = T::from_f64_c(self.config.bn_momentum);
        let one_m = T::one() - m;
        for (prefix, mean, var) in updates {
            let rm = self.buffers.get_mut(&format!("{prefix}.mean")).unwrap();
            *rm = &*rm * m + &(&mean * one_m);
            let rv = self.buffers.get_mut(&format!("{prefix}.var")).unwrap();
            *rv = &*rv * m + &(&var * one_m);
        }
        Ok(fwd)
    }

    #[allow(clippy::type_complexity)]
    fn forward_inner(
        &self,
        input: &Array4<T>,
        train: bool,
    ) -> Result<(Forward<T>, Vec<(String, Array1<T>, Array1<T>)>)> {
        let (c, d, h, w) = input.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.in_channels],
                got: vec![c],
            });
        }
        let div = self.config.divisor();
        for &e in &[d, h, w] {
            if e % div != 0 || e == 0 {
                return Err(Error::IndivisibleShape(e, div));
            }
        }

        let mut t = Tape::new();
        let mut named = Vec::new();
        let mut updates = Vec::new();
        let top = self.config.levels - 1;

        let x0 = t.leaf(input.clone().into_dyn());

        // Encoder with skips.
        let mut enc = Vec::with_capacity(self.config.levels);
        let mut x = x0;
        for l in 0..self.config.levels {
            if l > 0 {
                x = t.max_pool2(x);
                named.push((format!("EncDwn-{l}"), x));
            }
            x = self.block(&mut t, x, &format!("EncBlk-{l}"), train, &mut updates);
            named.push((format!("EncBlk-{l}"), x));
            enc.push(x);
        }

        // W path.
        let mut w_cat = vec![0; top];
        let mut w_blk = vec![0; top];
        for l in (0..top).rev() {
            let deeper = if l == top - 1 { enc[top] } else { w_blk[l + 1] };
            let up = t.upsample2(deeper);
            let cat = t.concat_channels(up, enc[l]);
            named.push((format!("W-DecCat-{l}"), cat));
            let sae = self.se(&mut t, cat, &format!("W-DecSae-{l}"));
            named.push((format!("W-DecSae-{l}"), sae));
            let blk = self.block(&mut t, sae, &format!("W-DecBlk-{l}"), train, &mut updates);
            named.push((format!("W-DecBlk-{l}"), blk));
            w_cat[l] = cat;
            w_blk[l] = blk;
        }

        // C path: its own upsampled deeper features, the encoder skip, and
        // the cross-fed W block at the same level.
        let mut c_cat = vec![0; top];
        let mut c_blk = vec![0; top];
        for l in (0..top).rev() {
            let deeper = if l == top - 1 { enc[top] } else { c_blk[l + 1] };
            let up = t.upsample2(deeper);
            let cat = t.concat_channels(up, enc[l]);
            let cat = t.concat_channels(cat, w_blk[l]);
            named.push((format!("C-DecCat-{l}"), cat));
            let sae = self.se(&mut t, cat, &format!("C-DecSae-{l}"));
            named.push((format!("C-DecSae-{l}"), sae));
            let blk = self.block(&mut t, sae, &format!("C-DecBlk-{l}"), train, &mut updates);
            named.push((format!("C-DecBlk-{l}"), blk));
            c_cat[l] = cat;
            c_blk[l] = blk;
        }

        // E path: mirrors the C path, cross-fed by C blocks. The wide
        // variant reuses the full C concat at the deepest level.
        let mut e_blk = vec![0; top];
        for l in (0..top).rev() {
            let cat = if self.config.e_path_wide && l == top - 1 {
                t.concat_channels(c_cat[l], c_blk[l])
            } else {
                let deeper = if l == top - 1 { enc[top] } else { e_blk[l + 1] };
                let up = t.upsample2(deeper);
                let cat = t.concat_channels(up, enc[l]);
                t.concat_channels(cat, c_blk[l])
            };
            named.push((format!("E-DecCat-{l}"), cat));
            let sae = self.se(&mut t, cat, &format!("E-DecSae-{l}"));
            named.push((format!("E-DecSae-{l}"), sae));
            let blk = self.block(&mut t, sae, &format!("E-DecBlk-{l}"), train, &mut updates);
            named.push((format!("E-DecBlk-{l}"), blk));
            e_blk[l] = blk;
        }

        let mut outputs = [0; 3];
        for (i, (path, blk)) in DECODER_PATHS
            .iter()
            .zip([w_blk[0], c_blk[0], e_blk[0]])
            .enumerate()
        {
            let wgt = self.pnode(&mut t, &format!("{path}-Output.conv.weight"));
            let bias = self.pnode(&mut t, &format!("{path}-Output.conv.bias"));
            let conv = t.conv(blk, wgt, bias, 1);
            let out = t.sigmoid(conv);
            named.push((format!("{path}-Output"), out));
            outputs[i] = out;
        }

        Ok((
            Forward {
                tape: t,
                named,
                outputs,
            },
            updates,
        ))
    }

    fn pnode(&self, t: &mut Tape<T>, name: &str) -> NodeId {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        t.param(self.params[idx].value.clone(), idx)
    }

    fn se(&self, t: &mut Tape<T>, x: NodeId, prefix: &str) -> NodeId {
        let gap = t.global_avg_pool(x);
        let w1 = self.pnode(t, &format!("{prefix}.fc1.weight"));
        let b1 = self.pnode(t, &format!("{prefix}.fc1.bias"));
        let h = t.dense(gap, w1, b1);
        let h = t.relu(h);
        let w2 = self.pnode(t, &format!("{prefix}.fc2.weight"));
        let b2 = self.pnode(t, &format!("{prefix}.fc2.bias"));
        let s = t.dense(h, w2, b2);
        let s = t.sigmoid(s);
        t.channel_scale(x, s)
    }

    fn bn(
        &self,
        t: &mut Tape<T>,
        x: NodeId,
        prefix: &str,
        train: bool,
        updates: &mut Vec<(String, Array1<T>, Array1<T>)>,
    ) -> NodeId {
        let gamma = self.pnode(t, &format!("{prefix}.gamma"));
        let beta = self.pnode(t, &format!("{prefix}.beta"));
        if train {
            let (node, mean, var) = t.batch_norm_train(x, gamma, beta, T::from_f64_c(self.config.bn_eps));
            updates.push((prefix.to_string(), mean, var));
            node
        } else {
            let g = self.param(&format!("{prefix}.gamma")).unwrap();
            let b = self.param(&format!("{prefix}.beta")).unwrap();
            let rm = &self.buffers[&format!("{prefix}.mean")];
            let rv = &self.buffers[&format!("{prefix}.var")];
            let eps = T::from_f64_c(self.config.bn_eps);
            let c = rm.len();
            let mut mul = Array1::zeros(c);
            let mut add = Array1::zeros(c);
            for i in 0..c {
                let k = g[[i]] / (rv[i] + eps).sqrt();
                mul[i] = k;
                add[i] = b[[i]] - rm[i] * k;
            }
            t.channel_affine(x, mul, add)
        }
    }

    fn block(
        &self,
        t: &mut Tape<T>,
        input: NodeId,
        name: &str,
        train: bool,
        updates: &mut Vec<(String, Array1<T>, Array1<T>)>,
    ) -> NodeId {
        let slope = T::from_f64_c(self.config.leaky_slope);
        let mut x = input;
        for j in 1..=2 {
            let wgt = self.pnode(t, &format!("{name}.conv{j}.weight"));
            let bias = self.pnode(t, &format!("{name}.conv{j}.bias"));
            x = t.conv(x, wgt, bias, 3);
            x = self.bn(t, x, &format!("{name}.bn{j}"), train, updates);
            x = t.leaky_relu(x, slope);
            x = self.se(t, x, &format!("{name}.se{j}"));
        }
        x
    }

    // ---- shape trace ----

    /// Per-block output shapes for a given input extent, computed purely
    /// symbolically. Shares the channel arithmetic with the real builder.
    pub fn shape_trace(&self, spatial: [usize; 3]) -> Result<Vec<(String, [usize; 4])>> {
        let cfg = &self.config;
        let div = cfg.divisor();
        for &e in &spatial {
            if e % div != 0 || e == 0 {
                return Err(Error::IndivisibleShape(e, div));
            }
        }
        let top = cfg.levels - 1;
        let at = |l: usize| -> [usize; 3] {
            [spatial[0] >> l, spatial[1] >> l, spatial[2] >> l]
        };
        let shape = |c: usize, s: [usize; 3]| [c, s[0], s[1], s[2]];
        let mut out = Vec::new();
        for l in 0..cfg.levels {
            if l > 0 {
                out.push((format!("EncDwn-{l}"), shape(cfg.filters(l - 1), at(l))));
            }
            out.push((format!("EncBlk-{l}"), shape(cfg.filters(l), at(l))));
        }
        for path in DECODER_PATHS {
            for l in (0..top).rev() {
                let c = cfg.cat_channels(path, l);
                out.push((format!("{path}-DecCat-{l}"), shape(c, at(l))));
                out.push((format!("{path}-DecSae-{l}"), shape(c, at(l))));
                out.push((format!("{path}-DecBlk-{l}"), shape(cfg.filters(l), at(l))));
            }
            out.push((format!("{path}-Output"), shape(1, at(0))));
        }
        Ok(out)
    }

    // ---- checkpoints ----

    /// Writes a single-file checkpoint: magic, config JSON, named parameter
    /// tensors, batch-norm buffers. Values are stored as little-endian f64.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"MDNC")?;
        w.write_u32::<LittleEndian>(1)?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_u64::<LittleEndian>(cfg.len() as u64)?;
        w.write_all(&cfg)?;
        w.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for p in &self.params {
            write_name(&mut w, &p.name)?;
            w.write_u8(p.is_kernel as u8)?;
            w.write_u8(p.value.ndim() as u8)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in p.value.iter() {
                w.write_f64::<LittleEndian>(v.to_f64_c())?;
            }
        }
        w.write_u64::<LittleEndian>(self.buffers.len() as u64)?;
        for (name, buf) in &self.buffers {
            write_name(&mut w, name)?;
            w.write_u64::<LittleEndian>(buf.len() as u64)?;
            for &v in buf.iter() {
                w.write_f64::<LittleEndian>(v.to_f64_c())?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MDNC" {
            return Err(Error::MalformedFile("bad checkpoint magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::MalformedFile(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = r.read_u64::<LittleEndian>()? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_buf)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_buf)?;
        config.validate()?;

        let n_params = r.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        let mut index = BTreeMap::new();
        for i in 0..n_params {
            let name = read_name(&mut r)?;
            let is_kernel = r.read_u8()? != 0;
            let ndim = r.read_u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(T::from_f64_c(r.read_f64::<LittleEndian>()?));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::MalformedFile(e.to_string()))?;
            index.insert(name.clone(), i);
            params.push(ParamDef {
                name,
                value,
                is_kernel,
            });
        }
        let n_buffers = r.read_u64::<LittleEndian>()? as usize;
        let mut buffers = BTreeMap::new();
        for _ in 0..n_buffers {
            let name = read_name(&mut r)?;
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(T::from_f64_c(r.read_f64::<LittleEndian>()?));
            }
            buffers.insert(name, Array1::from_vec(data));
        }
        Ok(Self {
            config,
            params,
            index,
            buffers,
        })
    }
}

impl ModelConfig {
    /// Channels entering `{path}-DecCat-{l}`.
    fn cat_channels(&self, path: &str, l: usize) -> usize {
        let top = self.levels - 1;
        let w_cat = self.filters(l + 1) + self.filters(l);
        match path {
            "W" => w_cat,
            "C" => self.filters(l) + w_cat,
            "E" => {
                if self.e_path_wide && l == top - 1 {
                    // concat(C-DecCat-l, C-DecBlk-l)
                    (self.filters(l) + w_cat) + self.filters(l)
                } else {
                    self.filters(l) + w_cat
                }
            }
            _ => unreachable!(),
        }
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 16 {
        return Err(Error::MalformedFile("oversized name".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::MalformedFile(e.to_string()))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
