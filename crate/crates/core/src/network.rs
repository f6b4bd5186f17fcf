//! Shared-MLP point encoder with a supervised head and a reconstruction
//! head, with an explicit reverse pass.
//!
//! The encoder applies the same stack of `Linear + ReLU` layers to every
//! point and max-pools the widest layer into a global feature. The
//! supervised head is a fully connected stack on the global feature
//! (classification) or a per-point stack on `[global, point features]`
//! (segmentation). The reconstruction head is always per-point on
//! `[global, point features]`, where the point features are the outputs of
//! every per-point encoder layer below the pooled one.
//!
//! Weights are stored `fan_in x fan_out` row-major so a layer is `Y = X W + b`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::linalg::{add_col_sums, gemm, Operand};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Per-point encoder layers below the pooled layer.
    pub point_widths: Vec<usize>,
    /// Width of the pooled per-point layer, i.e. of the global feature.
    pub global_width: usize,
    /// Hidden widths of the supervised head (output width is `num_classes`).
    pub sup_widths: Vec<usize>,
    /// Hidden widths of the reconstruction head (output width is 3).
    pub ssl_widths: Vec<usize>,
    /// Dropout rate on the first two hidden layers of the supervised head.
    pub dropout: f64,
}

impl NetworkConfig {
    /// Layer widths of the reference architecture.
    pub fn reference(task: Task, num_classes: usize) -> Self {
        Self {
            task,
            num_classes,
            point_widths: vec![64, 64, 128, 256],
            global_width: 1024,
            sup_widths: match task {
                Task::Classification => vec![512, 256],
                Task::Segmentation => vec![256, 256, 128],
            },
            ssl_widths: vec![256, 256, 128],
            dropout: 0.5,
        }
    }

    /// The reference topology at a quarter of the width, for CPU-scale runs.
    pub fn compact(task: Task, num_classes: usize) -> Self {
        Self {
            task,
            num_classes,
            point_widths: vec![16, 16, 32, 64],
            global_width: 256,
            sup_widths: match task {
                Task::Classification => vec![128, 64],
                Task::Segmentation => vec![64, 64, 32],
            },
            ssl_widths: vec![64, 64, 32],
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_classes < 2 {
            return bad("network needs at least two classes");
        }
        if self.point_widths.is_empty() || self.point_widths.contains(&0) || self.global_width == 0 {
            return bad("encoder widths must be non-empty and positive");
        }
        if self.sup_widths.contains(&0) || self.ssl_widths.contains(&0) {
            return bad("head widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn point_feature_width(&self) -> usize {
        self.point_widths.iter().sum()
    }

    fn per_point_head_input(&self) -> usize {
        self.global_width + self.point_feature_width()
    }

    pub fn sup_is_per_point(&self) -> bool {
        self.task == Task::Segmentation
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![3];
        dims.extend(&self.point_widths);
        dims.push(self.global_width);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn head_shapes(input: usize, hidden: &[usize], out: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend(hidden);
        dims.push(out);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn sup_shapes(&self) -> Vec<(usize, usize)> {
        let input = if self.sup_is_per_point() {
            self.per_point_head_input()
        } else {
            self.global_width
        };
        Self::head_shapes(input, &self.sup_widths, self.num_classes)
    }

    fn ssl_shapes(&self) -> Vec<(usize, usize)> {
        Self::head_shapes(self.per_point_head_input(), &self.ssl_widths, 3)
    }
}

/// A dense layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)` (He initialisation for ReLU layers), zero bias.
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            fan_in,
            fan_out,
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, input: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.fan_out);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            Operand::plain(input, rows, self.fan_in),
            Operand::plain(&self.weight, self.fan_in, self.fan_out),
            &mut out,
            1.0,
        );
        out
    }

    /// Weight rows `[start, start + len)` as a `len x fan_out` block.
    fn rows(&self, start: usize, len: usize) -> &[f64] {
        &self.weight[start * self.fan_out..(start + len) * self.fan_out]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Sup,
    Ssl,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Sup, Group::Ssl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Sup => "sup",
            Group::Ssl => "ssl",
        }
    }
}

/// The three layer stacks, shared by parameters and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers {
    pub encoder: Vec<Linear>,
    pub sup: Vec<Linear>,
    pub ssl: Vec<Linear>,
}

impl Layers {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let mk = |shapes: Vec<(usize, usize)>| shapes.into_iter().map(|(i, o)| Linear::zeros(i, o)).collect();
        Self {
            encoder: mk(config.encoder_shapes()),
            sup: mk(config.sup_shapes()),
            ssl: mk(config.ssl_shapes()),
        }
    }

    pub fn group(&self, g: Group) -> &[Linear] {
        match g {
            Group::Encoder => &self.encoder,
            Group::Sup => &self.sup,
            Group::Ssl => &self.ssl,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [Linear] {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Sup => &mut self.sup,
            Group::Ssl => &mut self.ssl,
        }
    }

    /// Every tensor in canonical order: groups in [`Group::ALL`] order, each
    /// layer's weight then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        Group::ALL
            .into_iter()
            .flat_map(move |g| self.group(g).iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> + '_ {
        self.encoder
            .iter_mut()
            .chain(self.sup.iter_mut())
            .chain(self.ssl.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for g in Group::ALL {
            for (i, l) in self.group(g).iter().enumerate() {
                out.push((format!("{}.{i}.weight", g.name()), vec![l.fan_in, l.fan_out]));
                out.push((format!("{}.{i}.bias", g.name()), vec![l.fan_out]));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub layers: Layers,
}

/// Gradients with the same shapes as [`ModelParams`], plus a record of which
/// groups received any gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Layers,
    pub touched: [bool; 3],
}

impl Gradients {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self {
            layers: Layers::zeros(config),
            touched: [false; 3],
        }
    }

    pub fn touched(&self, g: Group) -> bool {
        self.touched[g.index()]
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.tensors_mut().zip(other.layers.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (t, o) in self.touched.iter_mut().zip(other.touched) {
            *t |= o;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.layers.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.tensors().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from `seed`.
    Train { seed: u64 },
}

/// Encoder activations cached for the reverse pass.
#[derive(Debug, Clone)]
pub struct Encoding {
    n: usize,
    input: Vec<f64>,
    /// Post-ReLU outputs of every encoder layer, the pooled layer last.
    acts: Vec<Vec<f64>>,
    widths: Vec<usize>,
    argmax: Vec<usize>,
    global: Vec<f64>,
}

impl Encoding {
    pub fn n_points(&self) -> usize {
        self.n
    }

    /// The max-pooled global feature.
    pub fn global(&self) -> &[f64] {
        &self.global
    }

    /// Row of the pooled layer that produced each global channel.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn num_point_layers(&self) -> usize {
        self.acts.len() - 1
    }

    /// Per-point features of encoder layer `l` (1-based, `n x width`).
    pub fn layer(&self, l: usize) -> Option<(&[f64], usize)> {
        if l == 0 || l > self.acts.len() {
            return None;
        }
        Some((&self.acts[l - 1], self.widths[l - 1]))
    }

    fn point_parts(&self) -> Vec<&[f64]> {
        self.acts[..self.acts.len() - 1].iter().map(Vec::as_slice).collect()
    }
}

/// Activations of one head, cached for the reverse pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    rows: usize,
    /// Hidden outputs after ReLU and dropout.
    hidden: Vec<Vec<f64>>,
    /// `d hidden / d preactivation`: ReLU gate times dropout scale.
    gates: Vec<Vec<f64>>,
    output: Vec<f64>,
    out_width: usize,
}

impl HeadTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// Input of the final linear layer.
    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.last().map_or(&[][..], Vec::as_slice)
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow(what))
    }
}

/// Runs a head whose first layer sees `[global, parts...]` per row; `global`
/// is broadcast to every row.
fn head_forward(
    layers: &[Linear],
    global: &[f64],
    parts: &[&[f64]],
    rows: usize,
    dropout: f64,
    mut rng: Option<Rng>,
    what: &'static str,
) -> Result<HeadTrace> {
    let first = &layers[0];
    let out0 = first.fan_out;
    let g = global.len();
    let mut gw = first.bias.clone();
    gemm(Operand::plain(global, 1, g), Operand::plain(first.rows(0, g), g, out0), &mut gw, 1.0);
    let mut z = Vec::with_capacity(rows * out0);
    for _ in 0..rows {
        z.extend_from_slice(&gw);
    }
    let mut offset = g;
    for part in parts {
        let w = part.len() / rows;
        gemm(
            Operand::plain(part, rows, w),
            Operand::plain(first.rows(offset, w), w, out0),
            &mut z,
            1.0,
        );
        offset += w;
    }
    debug_assert_eq!(offset, first.fan_in);

    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(layers.len() - 1);
    let mut gates = Vec::with_capacity(layers.len() - 1);
    for (li, layer) in layers.iter().enumerate() {
        if li > 0 {
            z = layer.forward(hidden.last().expect("previous hidden layer"), rows);
        }
        if li + 1 == layers.len() {
            break;
        }
        let drop = match rng.as_mut() {
            Some(r) if li < 2 && dropout > 0.0 => Some(r),
            _ => None,
        };
        let mut gate = vec![0.0; z.len()];
        match drop {
            Some(r) => {
                let keep = 1.0 - dropout;
                for (v, gt) in z.iter_mut().zip(gate.iter_mut()) {
                    let scale = if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    if *v > 0.0 {
                        *gt = scale;
                        *v *= scale;
                    } else {
                        *v = 0.0;
                    }
                }
            }
            None => {
                for (v, gt) in z.iter_mut().zip(gate.iter_mut()) {
                    if *v > 0.0 {
                        *gt = 1.0;
                    } else {
                        *v = 0.0;
                    }
                }
            }
        }
        check_finite(&z, what)?;
        hidden.push(std::mem::take(&mut z));
        gates.push(gate);
    }
    check_finite(&z, what)?;
    let out_width = layers.last().unwrap().fan_out;
    Ok(HeadTrace {
        rows,
        hidden,
        gates,
        output: z,
        out_width,
    })
}

/// Reverse pass of [`head_forward`]; returns `d global` and, when `parts`
/// is non-empty, `d part` for each part.
fn head_backward(
    layers: &[Linear],
    grads: &mut [Linear],
    trace: &HeadTrace,
    global: &[f64],
    parts: &[&[f64]],
    dout: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let rows = trace.rows;
    let mut d = dout.to_vec();
    for li in (1..layers.len()).rev() {
        let (fi, fo) = (layers[li].fan_in, layers[li].fan_out);
        let input = &trace.hidden[li - 1];
        gemm(
            Operand::transposed(input, fi, rows),
            Operand::plain(&d, rows, fo),
            &mut grads[li].weight,
            1.0,
        );
        add_col_sums(&d, fo, &mut grads[li].bias);
        let mut din = vec![0.0; rows * fi];
        gemm(
            Operand::plain(&d, rows, fo),
            Operand::transposed(&layers[li].weight, fo, fi),
            &mut din,
            0.0,
        );
        for (v, gt) in din.iter_mut().zip(&trace.gates[li - 1]) {
            *v *= gt;
        }
        d = din;
    }

    let first = &layers[0];
    let out0 = first.fan_out;
    let g = global.len();
    let mut colsum = vec![0.0; out0];
    add_col_sums(&d, out0, &mut colsum);
    for (b, s) in grads[0].bias.iter_mut().zip(&colsum) {
        *b += s;
    }
    gemm(
        Operand::plain(global, g, 1),
        Operand::plain(&colsum, 1, out0),
        &mut grads[0].weight[..g * out0],
        1.0,
    );
    let mut dglobal = vec![0.0; g];
    gemm(
        Operand::plain(first.rows(0, g), g, out0),
        Operand::plain(&colsum, out0, 1),
        &mut dglobal,
        0.0,
    );
    let mut dparts = Vec::with_capacity(parts.len());
    let mut offset = g;
    for part in parts {
        let w = part.len() / rows;
        gemm(
            Operand::transposed(part, w, rows),
            Operand::plain(&d, rows, out0),
            &mut grads[0].weight[offset * out0..(offset + w) * out0],
            1.0,
        );
        let mut dp = vec![0.0; rows * w];
        gemm(
            Operand::plain(&d, rows, out0),
            Operand::transposed(first.rows(offset, w), out0, w),
            &mut dp,
            0.0,
        );
        dparts.push(dp);
        offset += w;
    }
    (dglobal, dparts)
}

/// Everything the reverse pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoding: Encoding,
    pub sup: Option<HeadTrace>,
    pub ssl: Option<HeadTrace>,
}

/// Loss gradients at the head outputs (row-major like the outputs).
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub sup: Option<Vec<f64>>,
    pub ssl: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, &[stream::INIT]));
        let mut mk = |shapes: Vec<(usize, usize)>| -> Vec<Linear> {
            shapes.into_iter().map(|(i, o)| Linear::he_uniform(i, o, &mut rng)).collect()
        };
        let layers = Layers {
            encoder: mk(config.encoder_shapes()),
            sup: mk(config.sup_shapes()),
            ssl: mk(config.ssl_shapes()),
        };
        Ok(Self { config, layers })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = Layers::zeros(&config);
        Ok(Self { config, layers })
    }

    /// Checks that the stored tensors have the shapes `config` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let expect = Layers::zeros(&self.config);
        for g in Group::ALL {
            let (a, b) = (self.layers.group(g), expect.group(g));
            let same = a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.fan_in == y.fan_in
                        && x.fan_out == y.fan_out
                        && x.weight.len() == y.weight.len()
                        && x.bias.len() == y.bias.len()
                });
            if !same {
                return Err(Error::InvalidArgument(format!("{} tensors do not match the network config", g.name())));
            }
        }
        Ok(())
    }

    /// Shared encoder: per-point MLP with ReLU, then max-pool over points.
    /// The encoder has no mode-dependent layers.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Encoding> {
        let n = cloud.len();
        let input = cloud.to_flat();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.encoder.len());
        for layer in &self.layers.encoder {
            let prev = acts.last().map_or(input.as_slice(), Vec::as_slice);
            let mut z = layer.forward(prev, n);
            for v in &mut z {
                *v = v.max(0.0);
            }
            check_finite(&z, "encoder")?;
            acts.push(z);
        }
        let g = self.config.global_width;
        let last = acts.last().expect("encoder has layers");
        let mut global = last[..g].to_vec();
        let mut argmax = vec![0; g];
        for (r, row) in last.chunks_exact(g).enumerate().skip(1) {
            for c in 0..g {
                if row[c] > global[c] {
                    global[c] = row[c];
                    argmax[c] = r;
                }
            }
        }
        let widths = self.layers.encoder.iter().map(|l| l.fan_out).collect();
        Ok(Encoding {
            n,
            input,
            acts,
            widths,
            argmax,
            global,
        })
    }

    fn dropout_rng(mode: Mode) -> Option<Rng> {
        match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(seed::rng(seed::derive(seed, &[stream::DROPOUT]))),
        }
    }

    /// Supervised head: `num_classes` logits (classification) or
    /// `n x num_classes` logits (segmentation).
    pub fn head_sup(&self, enc: &Encoding, mode: Mode) -> Result<HeadTrace> {
        let rng = Self::dropout_rng(mode);
        if self.config.sup_is_per_point() {
            head_forward(&self.layers.sup, &enc.global, &enc.point_parts(), enc.n, self.config.dropout, rng, "supervised head")
        } else {
            head_forward(&self.layers.sup, &enc.global, &[], 1, self.config.dropout, rng, "supervised head")
        }
    }

    /// Reconstruction head: an `n x 3` cloud.
    pub fn head_ssl(&self, enc: &Encoding) -> Result<HeadTrace> {
        head_forward(&self.layers.ssl, &enc.global, &enc.point_parts(), enc.n, 0.0, None, "reconstruction head")
    }

    pub fn forward(&self, cloud: &PointCloud, sup: Option<Mode>, ssl: bool) -> Result<ForwardTrace> {
        let encoding = self.encode(cloud)?;
        let sup = sup.map(|m| self.head_sup(&encoding, m)).transpose()?;
        let ssl = if ssl { Some(self.head_ssl(&encoding)?) } else { None };
        Ok(ForwardTrace { encoding, sup, ssl })
    }

    /// Exact reverse pass, accumulating into `grads`.
    pub fn backward_into(&self, trace: &ForwardTrace, upstream: &OutputGrads, grads: &mut Gradients) -> Result<()> {
        let enc = &trace.encoding;
        self.check_trace(trace, upstream)?;
        let parts = enc.point_parts();
        let mut dglobal = vec![0.0; self.config.global_width];
        let mut dpoint: Vec<Vec<f64>> = enc.acts[..parts.len()].iter().map(|a| vec![0.0; a.len()]).collect();
        let mut any = false;

        if let (Some(tr), Some(d)) = (&trace.sup, &upstream.sup) {
            let per_point = self.config.sup_is_per_point();
            let p: &[&[f64]] = if per_point { &parts } else { &[] };
            let (dg, dp) = head_backward(&self.layers.sup, &mut grads.layers.sup, tr, &enc.global, p, d);
            accumulate(&mut dglobal, &dg);
            for (acc, x) in dpoint.iter_mut().zip(&dp) {
                accumulate(acc, x);
            }
            grads.touched[Group::Sup.index()] = true;
            any = true;
        }
        if let (Some(tr), Some(d)) = (&trace.ssl, &upstream.ssl) {
            let (dg, dp) = head_backward(&self.layers.ssl, &mut grads.layers.ssl, tr, &enc.global, &parts, d);
            accumulate(&mut dglobal, &dg);
            for (acc, x) in dpoint.iter_mut().zip(&dp) {
                accumulate(acc, x);
            }
            grads.touched[Group::Ssl.index()] = true;
            any = true;
        }
        if !any {
            return Ok(());
        }
        grads.touched[Group::Encoder.index()] = true;
        self.encoder_backward(enc, &dglobal, dpoint, &mut grads.layers.encoder);
        Ok(())
    }

    pub fn backward(&self, trace: &ForwardTrace, upstream: &OutputGrads) -> Result<Gradients> {
        let mut grads = Gradients::zeros(&self.config);
        self.backward_into(trace, upstream, &mut grads)?;
        Ok(grads)
    }

    fn check_trace(&self, trace: &ForwardTrace, upstream: &OutputGrads) -> Result<()> {
        let enc = &trace.encoding;
        let widths_ok = enc.widths.len() == self.layers.encoder.len()
            && enc.widths.iter().zip(&self.layers.encoder).all(|(w, l)| *w == l.fan_out);
        if !widths_ok {
            return Err(Error::InvalidArgument("trace does not match the parameters".into()));
        }
        let check = |tr: &Option<HeadTrace>, d: &Option<Vec<f64>>, layers: &[Linear], what: &'static str| -> Result<()> {
            let Some(d) = d else { return Ok(()) };
            let Some(tr) = tr else {
                return Err(Error::InvalidArgument(format!("upstream gradient for the {what} head without its trace")));
            };
            let hidden_ok = tr.hidden.len() + 1 == layers.len()
                && tr.hidden.iter().zip(layers).all(|(h, l)| h.len() == tr.rows * l.fan_out);
            if !hidden_ok || tr.out_width != layers.last().unwrap().fan_out {
                return Err(Error::InvalidArgument(format!("{what} trace does not match the parameters")));
            }
            if d.len() != tr.output.len() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: tr.output.len(),
                    found: d.len(),
                });
            }
            Ok(())
        };
        check(&trace.sup, &upstream.sup, &self.layers.sup, "supervised")?;
        check(&trace.ssl, &upstream.ssl, &self.layers.ssl, "reconstruction")
    }

    fn encoder_backward(&self, enc: &Encoding, dglobal: &[f64], mut dpoint: Vec<Vec<f64>>, grads: &mut [Linear]) {
        let n = enc.n;
        let layers = &self.layers.encoder;
        let top = layers.len() - 1;
        let g = self.config.global_width;
        let below_w = layers[top].fan_in;

        // Max-pool routes each channel's gradient to its argmax row only, so
        // the pooled layer's reverse pass is sparse.
        {
            let a_top = &enc.acts[top];
            let below: &[f64] = if top == 0 { &enc.input } else { &enc.acts[top - 1] };
            let w = &layers[top].weight;
            let gw = &mut grads[top];
            let mut dbelow = vec![0.0; n * below_w];
            for c in 0..g {
                let r = enc.argmax[c];
                let dz = dglobal[c];
                if dz == 0.0 || a_top[r * g + c] <= 0.0 {
                    continue;
                }
                gw.bias[c] += dz;
                let x = &below[r * below_w..(r + 1) * below_w];
                let drow = &mut dbelow[r * below_w..(r + 1) * below_w];
                for i in 0..below_w {
                    gw.weight[i * g + c] += x[i] * dz;
                    drow[i] += dz * w[i * g + c];
                }
            }
            if top > 0 {
                accumulate(&mut dpoint[top - 1], &dbelow);
            }
        }

        for l in (0..top).rev() {
            let (fi, fo) = (layers[l].fan_in, layers[l].fan_out);
            let mut dz = std::mem::take(&mut dpoint[l]);
            for (v, a) in dz.iter_mut().zip(&enc.acts[l]) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            let input: &[f64] = if l == 0 { &enc.input } else { &enc.acts[l - 1] };
            gemm(
                Operand::transposed(input, fi, n),
                Operand::plain(&dz, n, fo),
                &mut grads[l].weight,
                1.0,
            );
            add_col_sums(&dz, fo, &mut grads[l].bias);
            if l > 0 {
                gemm(
                    Operand::plain(&dz, n, fo),
                    Operand::transposed(&layers[l].weight, fo, fi),
                    &mut dpoint[l - 1],
                    1.0,
                );
            }
        }
    }

    /// Class prediction (lowest index on ties), eval mode.
    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        let enc = self.encode(cloud)?;
        Ok(argmax(self.head_sup(&enc, Mode::Eval)?.output()))
    }

    /// Per-point class predictions for the segmentation task.
    pub fn predict_points(&self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let enc = self.encode(cloud)?;
        let tr = self.head_sup(&enc, Mode::Eval)?;
        Ok(tr.output().chunks_exact(tr.out_width()).map(argmax).collect())
    }

    /// Input of the final supervised layer in eval mode (post-ReLU, no
    /// dropout); the representation used for perplexity.
    pub fn embed(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let enc = self.encode(cloud)?;
        Ok(self.head_sup(&enc, Mode::Eval)?.last_hidden().to_vec())
    }

    pub fn reconstruct(&self, cloud: &PointCloud) -> Result<Vec<Point3>> {
        let enc = self.encode(cloud)?;
        Ok(self
            .head_ssl(&enc)?
            .output()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.layers.tensors_mut().zip(grads.layers.tensors()) {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    }
}

fn accumulate(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `-sum_c t_c log softmax(z)_c` and its gradient `softmax(z) - t`
/// (valid for targets summing to one).
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), target.len());
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let log_z = m + sum.ln();
    let loss = -logits.iter().zip(target).map(|(z, t)| if *t == 0.0 { 0.0 } else { t * (z - log_z) }).sum::<f64>();
    let grad = logits.iter().zip(target).map(|(z, t)| (z - log_z).exp() - t).collect();
    (loss, grad)
}

/// Mean per-point cross-entropy against hard labels and its gradient.
pub fn pointwise_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut onehot = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot.iter_mut().for_each(|v| *v = 0.0);
        onehot[y] = 1.0;
        let (l, g) = softmax_cross_entropy(&logits[i * classes..(i + 1) * classes], &onehot);
        total += l;
        for (dst, src) in grad[i * classes..(i + 1) * classes].iter_mut().zip(g) {
            *dst = src / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// Runs `per_sample` over `items` in fixed-size chunks, in parallel across
/// chunks, and sums the results in chunk order. Output does not depend on the
/// number of worker threads.
pub fn accumulate_gradients<T, F>(config: &NetworkConfig, items: &[T], per_sample: F) -> Result<(Gradients, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut Gradients) -> Result<f64> + Sync,
{
    const CHUNK: usize = 4;
    let partial: Vec<Result<(Gradients, Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros(config);
            let mut losses = Vec::with_capacity(chunk.len());
            for item in chunk {
                losses.push(per_sample(item, &mut g)?);
            }
            Ok((g, losses))
        })
        .collect();
    let mut total = Gradients::zeros(config);
    let mut losses = Vec::with_capacity(items.len());
    for p in partial {
        let (g, l) = p?;
        total.add(&g);
        losses.extend(l);
    }
    Ok((total, losses))
}
