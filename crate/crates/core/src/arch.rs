//! Architecture shorthand notation: parsing, rendering, shape inference and
//! the forward-pass cost model.
//!
//! The notation describes a network as `-`-separated layer tokens:
//!
//! * `C<k>(S<s>P<p>)@<c>` — convolution, `k`x`k` kernel, stride `s`,
//!   zero-padding `p`, `c` output channels. The parenthesized group is
//!   optional and defaults to `S1P0`.
//! * `MP<k>(S<s>)` / `AP<k>(S<s>)` — max / average pooling with a `k`x`k`
//!   window and stride `s` (default `S1`).
//! * `FC<u>` — fully connected layer with `u` output units.
//! * `D<r>` — dropout with drop probability `r` in `[0, 1]`.
//!
//! Square brackets and whitespace are grouping sugar and carry no meaning.
//!
//! Pooling output sizes use ceil-mode arithmetic, `ceil((n - k) / s) + 1`,
//! with windows clipped at the border. Convolutions use the usual
//! `floor((n + 2p - k) / s) + 1`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("semantic error at byte {offset}: {message}")]
    Semantic { offset: usize, message: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("compression ratio denominator is zero")]
    ZeroDenominator,
}

fn syntax(offset: usize, message: impl Into<String>) -> ArchError {
    ArchError::Syntax {
        offset,
        message: message.into(),
    }
}

fn semantic(offset: usize, message: impl Into<String>) -> ArchError {
    ArchError::Semantic {
        offset,
        message: message.into(),
    }
}

/// A single layer of an architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    FullyConnected {
        out_units: usize,
    },
    Dropout {
        drop_prob: f64,
    },
}

impl LayerSpec {
    /// True for layers that carry weights and produce class scores when last.
    pub fn is_scoring(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }
        )
    }
}

/// A parsed architecture: an ordered layer sequence plus the original text.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub source_text: String,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let mut spec = ArchSpec {
            layers,
            source_text: String::new(),
        };
        spec.source_text = render_arch(&spec);
        spec
    }

    /// Index of the last Conv or FullyConnected layer — the layer producing
    /// the class scores. Layers before it get a ReLU in the engine; it does
    /// not.
    pub fn scoring_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(LayerSpec::is_scoring)
    }

    /// Checks the classifier-shape invariant: the last score-producing layer
    /// must be a FullyConnected layer, or a 1x1 convolution followed only by
    /// pooling (the network-in-network ending). Fragments used purely for
    /// shape or cost analysis need not satisfy this.
    pub fn validate_classifier(&self) -> Result<(), ArchError> {
        let idx = self.scoring_layer().ok_or_else(|| {
            ArchError::Shape("architecture has no score-producing layer".into())
        })?;
        match &self.layers[idx] {
            LayerSpec::FullyConnected { .. } => {}
            LayerSpec::Conv { kernel: 1, .. } => {
                let tail_ok = self.layers[idx + 1..]
                    .iter()
                    .all(|l| matches!(l, LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. }));
                if !tail_ok {
                    return Err(ArchError::Shape(
                        "a 1x1 convolution producing class scores may be followed only by pooling"
                            .into(),
                    ));
                }
            }
            _ => {
                return Err(ArchError::Shape(
                    "last score-producing layer must be fully connected or a 1x1 convolution"
                        .into(),
                ));
            }
        }
        if idx + 1 < self.layers.len()
            && matches!(self.layers[idx], LayerSpec::FullyConnected { .. })
        {
            let tail_ok = self.layers[idx + 1..]
                .iter()
                .all(|l| !l.is_scoring());
            debug_assert!(tail_ok, "rposition guarantees no scoring layer after idx");
        }
        Ok(())
    }
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// height x width x channels
    Spatial(usize, usize, usize),
    /// flattened feature vector
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial(h, w, c) => h * w * c,
            Shape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Spatial(h, w, c) => write!(f, "{}x{}x{}", h, w, c),
            Shape::Flat(n) => write!(f, "{}", n),
        }
    }
}

/// Per-layer and total multiplication / parameter counts with the shape trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub per_layer_mults: Vec<u64>,
    pub total_mults: u64,
    pub per_layer_params: Vec<u64>,
    pub total_params: u64,
    pub shape_trace: Vec<Shape>,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// A character of the input with its byte offset in the original text,
/// after stripping grouping sugar.
type Tok = (usize, char);

fn significant_chars(text: &str) -> Vec<Tok> {
    text.char_indices()
        .filter(|(_, c)| !c.is_whitespace() && *c != '[' && *c != ']')
        .collect()
}

struct TokenCursor<'a> {
    toks: &'a [Tok],
    pos: usize,
    /// Offset to report when the token ends unexpectedly.
    end_offset: usize,
}

impl<'a> TokenCursor<'a> {
    fn new(toks: &'a [Tok], end_offset: usize) -> Self {
        TokenCursor {
            toks,
            pos: 0,
            end_offset,
        }
    }

    fn peek(&self) -> Option<char> {
        self.toks.get(self.pos).map(|&(_, c)| c)
    }

    fn offset(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|&(o, _)| o)
            .unwrap_or(self.end_offset)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn eat(&mut self, expected: char) -> Result<(), ArchError> {
        match self.peek() {
            Some(c) if c == expected => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(syntax(
                self.offset(),
                format!("expected '{}', found '{}'", expected, c),
            )),
            None => Err(syntax(
                self.end_offset,
                format!("expected '{}', found end of token", expected),
            )),
        }
    }

    fn integer(&mut self, what: &str) -> Result<(usize, usize), ArchError> {
        let start = self.offset();
        let mut digits = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                digits.push(c);
                self.pos += 1;
            } else {
                break;
            }
        }
        if digits.is_empty() {
            return Err(syntax(start, format!("expected {} (an integer)", what)));
        }
        let value = digits
            .parse::<usize>()
            .map_err(|_| syntax(start, format!("{} out of range", what)))?;
        Ok((value, start))
    }

    fn real(&mut self, what: &str) -> Result<(f64, usize), ArchError> {
        let start = self.offset();
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || c == '.' {
                s.push(c);
                self.pos += 1;
            } else {
                break;
            }
        }
        if s.is_empty() {
            return Err(syntax(start, format!("expected {} (a number)", what)));
        }
        let value = s
            .parse::<f64>()
            .map_err(|_| syntax(start, format!("malformed {}", what)))?;
        Ok((value, start))
    }

    fn done(&self) -> bool {
        self.pos == self.toks.len()
    }
}

/// Parses `(S<s>P<p>)`, `(S<s>)` or `(P<p>)`. `allow_padding` is false for
/// pooling layers, whose notation carries no padding.
fn parse_group(
    cur: &mut TokenCursor,
    allow_padding: bool,
) -> Result<(usize, usize), ArchError> {
    let mut stride = 1usize;
    let mut padding = 0usize;
    if cur.peek() != Some('(') {
        return Ok((stride, padding));
    }
    cur.eat('(')?;
    let mut saw_any = false;
    loop {
        match cur.peek() {
            Some('S') => {
                cur.bump();
                let (s, off) = cur.integer("stride")?;
                if s == 0 {
                    return Err(semantic(off, "stride must be at least 1"));
                }
                stride = s;
                saw_any = true;
            }
            Some('P') if allow_padding => {
                cur.bump();
                let (p, _) = cur.integer("padding")?;
                padding = p;
                saw_any = true;
            }
            Some(')') => {
                if !saw_any {
                    return Err(syntax(cur.offset(), "empty stride/padding group"));
                }
                cur.eat(')')?;
                return Ok((stride, padding));
            }
            Some(c) => {
                return Err(syntax(
                    cur.offset(),
                    format!("unexpected '{}' in stride/padding group", c),
                ));
            }
            None => {
                return Err(syntax(cur.end_offset, "unterminated stride/padding group"));
            }
        }
    }
}

fn parse_token(toks: &[Tok], end_offset: usize) -> Result<LayerSpec, ArchError> {
    let mut cur = TokenCursor::new(toks, end_offset);
    let start = cur.offset();
    let layer = match cur.peek() {
        Some('C') => {
            cur.bump();
            let (kernel, koff) = cur.integer("kernel size")?;
            if kernel == 0 {
                return Err(semantic(koff, "kernel size must be at least 1"));
            }
            let (stride, padding) = parse_group(&mut cur, true)?;
            cur.eat('@')?;
            let (out_channels, coff) = cur.integer("channel count")?;
            if out_channels == 0 {
                return Err(semantic(coff, "channel count must be at least 1"));
            }
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                out_channels,
            }
        }
        Some('M') => {
            cur.bump();
            cur.eat('P')?;
            let (kernel, koff) = cur.integer("kernel size")?;
            if kernel == 0 {
                return Err(semantic(koff, "kernel size must be at least 1"));
            }
            let (stride, _) = parse_group(&mut cur, false)?;
            LayerSpec::MaxPool { kernel, stride }
        }
        Some('A') => {
            cur.bump();
            cur.eat('P')?;
            let (kernel, koff) = cur.integer("kernel size")?;
            if kernel == 0 {
                return Err(semantic(koff, "kernel size must be at least 1"));
            }
            let (stride, _) = parse_group(&mut cur, false)?;
            LayerSpec::AvgPool { kernel, stride }
        }
        Some('F') => {
            cur.bump();
            cur.eat('C')?;
            let (out_units, uoff) = cur.integer("unit count")?;
            if out_units == 0 {
                return Err(semantic(uoff, "unit count must be at least 1"));
            }
            LayerSpec::FullyConnected { out_units }
        }
        Some('D') => {
            cur.bump();
            let (drop_prob, doff) = cur.real("drop probability")?;
            if !(0.0..=1.0).contains(&drop_prob) {
                return Err(semantic(doff, "drop probability must lie in [0, 1]"));
            }
            LayerSpec::Dropout { drop_prob }
        }
        Some(c) => return Err(syntax(start, format!("unknown layer token '{}'", c))),
        None => return Err(syntax(end_offset, "empty layer token")),
    };
    if !cur.done() {
        return Err(syntax(cur.offset(), "trailing characters after layer token"));
    }
    Ok(layer)
}

/// Parses an architecture string into an [`ArchSpec`].
pub fn parse_arch(text: &str) -> Result<ArchSpec, ArchError> {
    let toks = significant_chars(text);
    if toks.is_empty() {
        return Err(syntax(0, "empty architecture"));
    }
    let end_offset = text.len();
    let mut layers = Vec::new();
    let mut token_start = 0usize;
    loop {
        let sep = toks[token_start..]
            .iter()
            .position(|&(_, c)| c == '-')
            .map(|i| token_start + i);
        let token_end = sep.unwrap_or(toks.len());
        let token = &toks[token_start..token_end];
        let boundary = toks
            .get(token_end)
            .map(|&(o, _)| o)
            .unwrap_or(end_offset);
        if token.is_empty() {
            return Err(syntax(boundary, "empty layer token"));
        }
        layers.push(parse_token(token, boundary)?);
        match sep {
            Some(i) => token_start = i + 1,
            None => break,
        }
    }
    Ok(ArchSpec {
        layers,
        source_text: text.to_string(),
    })
}

/// Renders a spec in canonical form: no brackets, explicit stride and padding.
pub fn render_arch(spec: &ArchSpec) -> String {
    spec.layers
        .iter()
        .map(|layer| match layer {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                out_channels,
            } => format!("C{}(S{}P{})@{}", kernel, stride, padding, out_channels),
            LayerSpec::MaxPool { kernel, stride } => format!("MP{}(S{})", kernel, stride),
            LayerSpec::AvgPool { kernel, stride } => format!("AP{}(S{})", kernel, stride),
            LayerSpec::FullyConnected { out_units } => format!("FC{}", out_units),
            LayerSpec::Dropout { drop_prob } => format!("D{}", drop_prob),
        })
        .collect::<Vec<_>>()
        .join("-")
}

// ---------------------------------------------------------------------------
// Shape inference and cost model
// ---------------------------------------------------------------------------

fn conv_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, ArchError> {
    let padded = n + 2 * padding;
    if padded < kernel {
        return Err(ArchError::Shape(format!(
            "convolution kernel {} exceeds padded extent {}",
            kernel, padded
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Ceil-mode pooling extent: `ceil((n - k) / s) + 1`.
fn pool_extent(n: usize, kernel: usize, stride: usize) -> Result<usize, ArchError> {
    if n < kernel {
        // ceil((n - k)/s) + 1 <= 0 for n < k under integer semantics
        return Err(ArchError::Shape(format!(
            "pooling window {} exceeds input extent {}",
            kernel, n
        )));
    }
    Ok((n - kernel).div_ceil(stride) + 1)
}

fn shape_after(layer: &LayerSpec, input: Shape) -> Result<Shape, ArchError> {
    match layer {
        LayerSpec::Conv {
            kernel,
            stride,
            padding,
            out_channels,
        } => match input {
            Shape::Spatial(h, w, _) => {
                let oh = conv_extent(h, *kernel, *stride, *padding)?;
                let ow = conv_extent(w, *kernel, *stride, *padding)?;
                if oh == 0 || ow == 0 {
                    return Err(ArchError::Shape(
                        "convolution output has a zero-sized dimension".into(),
                    ));
                }
                Ok(Shape::Spatial(oh, ow, *out_channels))
            }
            Shape::Flat(_) => Err(ArchError::Shape(
                "convolution requires a spatial input".into(),
            )),
        },
        LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
            match input {
                Shape::Spatial(h, w, c) => {
                    let oh = pool_extent(h, *kernel, *stride)?;
                    let ow = pool_extent(w, *kernel, *stride)?;
                    Ok(Shape::Spatial(oh, ow, c))
                }
                Shape::Flat(_) => Err(ArchError::Shape("pooling requires a spatial input".into())),
            }
        }
        LayerSpec::FullyConnected { out_units } => Ok(Shape::Flat(*out_units)),
        LayerSpec::Dropout { .. } => Ok(input),
    }
}

/// Infers the shape after every layer for the given input dimensions.
pub fn infer_shapes(spec: &ArchSpec, input: (usize, usize, usize)) -> Result<Vec<Shape>, ArchError> {
    let (h, w, c) = input;
    if h == 0 || w == 0 || c == 0 {
        return Err(ArchError::Shape("input dimensions must be positive".into()));
    }
    let mut shape = Shape::Spatial(h, w, c);
    let mut trace = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        shape = shape_after(layer, shape)?;
        trace.push(shape);
    }
    Ok(trace)
}

fn layer_cost(layer: &LayerSpec, input: Shape, output: Shape) -> (u64, u64) {
    match layer {
        LayerSpec::Conv {
            kernel,
            out_channels,
            ..
        } => {
            let in_c = match input {
                Shape::Spatial(_, _, c) => c as u64,
                Shape::Flat(_) => unreachable!("shape inference rejects conv on flat input"),
            };
            let (oh, ow) = match output {
                Shape::Spatial(h, w, _) => (h as u64, w as u64),
                Shape::Flat(_) => unreachable!(),
            };
            let k2 = (*kernel as u64) * (*kernel as u64);
            let oc = *out_channels as u64;
            let mults = oh * ow * oc * k2 * in_c;
            let params = k2 * in_c * oc + oc;
            (mults, params)
        }
        LayerSpec::FullyConnected { out_units } => {
            let in_units = input.numel() as u64;
            let out = *out_units as u64;
            (in_units * out, in_units * out + out)
        }
        _ => (0, 0),
    }
}

fn cost_report(spec: &ArchSpec, input: (usize, usize, usize)) -> Result<CostReport, ArchError> {
    let trace = infer_shapes(spec, input)?;
    let mut per_layer_mults = Vec::with_capacity(spec.layers.len());
    let mut per_layer_params = Vec::with_capacity(spec.layers.len());
    let mut prev = Shape::Spatial(input.0, input.1, input.2);
    for (layer, &out) in spec.layers.iter().zip(&trace) {
        let (m, p) = layer_cost(layer, prev, out);
        per_layer_mults.push(m);
        per_layer_params.push(p);
        prev = out;
    }
    Ok(CostReport {
        total_mults: per_layer_mults.iter().sum(),
        total_params: per_layer_params.iter().sum(),
        per_layer_mults,
        per_layer_params,
        shape_trace: trace,
    })
}

/// Counts multiply operations per layer. Convolutions contribute
/// `out_h * out_w * out_c * k^2 * in_c`, fully connected layers `in * out`;
/// pooling, dropout, biases and activations contribute zero.
pub fn count_mults(spec: &ArchSpec, input: (usize, usize, usize)) -> Result<CostReport, ArchError> {
    cost_report(spec, input)
}

/// Counts parameters per layer (weights plus biases for Conv and
/// FullyConnected; zero elsewhere). Returns the same report as
/// [`count_mults`]; both fill every field.
pub fn count_params(spec: &ArchSpec, input: (usize, usize, usize)) -> Result<CostReport, ArchError> {
    cost_report(spec, input)
}

/// Exact runtime compression ratio: teacher multiplications over student's.
pub fn compression_ratio(teacher_mults: u64, student_mults: u64) -> Result<f64, ArchError> {
    if student_mults == 0 {
        return Err(ArchError::ZeroDenominator);
    }
    Ok(teacher_mults as f64 / student_mults as f64)
}

/// Compression ratio computed from megamult values already rounded for
/// display, itself rounded to two decimals.
pub fn display_compression_ratio(
    teacher_megamults: f64,
    student_megamults: f64,
) -> Result<f64, ArchError> {
    if student_megamults == 0.0 {
        return Err(ArchError::ZeroDenominator);
    }
    Ok((teacher_megamults / student_megamults * 100.0).round() / 100.0)
}

/// Multiplication count in millions at display precision: whole millions
/// from 20M upward, otherwise one decimal.
pub fn display_megamults(mults: u64) -> f64 {
    let m = mults as f64 / 1e6;
    if m >= 20.0 {
        m.round()
    } else {
        (m * 10.0).round() / 10.0
    }
}
