//! Feedforward ReLU classifiers: the on-disk JSON format, validation and
//! exact evaluation.
//!
//! A network is an alternating sequence `affine, relu, affine, ..., affine`.
//! ReLU layers are addressed by their position among ReLU layers only
//! (`relu layer 0` follows the first affine map), which is also how phase
//! constraints refer to neurons.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense affine map `x -> W x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Affine {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(None, "affine layer with zero rows or columns"));
        }
        if weights.len() != rows * cols {
            return Err(Error::shape(
                None,
                format!("weights hold {} values, expected {rows}x{cols}", weights.len()),
            ));
        }
        if bias.len() != rows {
            return Err(Error::shape(
                None,
                format!("bias length {} does not match {rows} weight rows", bias.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| dot(self.row(i), x) + self.bias[i])
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Relu { width: usize },
}

/// Raw class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `min_{i != y} (f_y - f_i)`; positive iff `y` wins strictly against every
/// other class. `+inf` for single-output networks.
pub fn logit_margin(logits: &[f64], y: usize) -> f64 {
    logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &v)| logits[y] - v)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    name: String,
    input_dim: usize,
    layers: Vec<Layer>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    labels: Option<Vec<String>>,
    affines: Vec<usize>,
}

impl Network {
    /// Builds and validates a network. `Relu` widths are checked against the
    /// preceding affine map.
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        layers: Vec<Layer>,
        input_lower: Vec<f64>,
        input_upper: Vec<f64>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::shape(None, "input_dim must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::shape(None, "network has no layers"));
        }
        let mut affines = Vec::new();
        let mut width = input_dim;
        for (idx, layer) in layers.iter().enumerate() {
            let expect_affine = idx % 2 == 0;
            match layer {
                Layer::Affine(a) => {
                    if !expect_affine {
                        return Err(Error::shape(idx, "expected a relu layer between affine layers"));
                    }
                    if a.cols != width {
                        return Err(Error::shape(
                            idx,
                            format!("affine layer takes {} inputs but receives {width}", a.cols),
                        ));
                    }
                    width = a.rows;
                    affines.push(idx);
                }
                Layer::Relu { width: w } => {
                    if expect_affine {
                        return Err(Error::shape(idx, "expected an affine layer"));
                    }
                    if *w != width {
                        return Err(Error::shape(
                            idx,
                            format!("relu width {w} does not match preceding affine rows {width}"),
                        ));
                    }
                }
            }
        }
        if !matches!(layers.last(), Some(Layer::Affine(_))) {
            return Err(Error::shape(layers.len() - 1, "final layer must be affine"));
        }
        if input_lower.len() != input_dim || input_upper.len() != input_dim {
            return Err(Error::shape(None, "input bounds must have length input_dim"));
        }
        if let Some(i) = (0..input_dim).find(|&i| !(input_lower[i] <= input_upper[i])) {
            return Err(Error::Domain(format!(
                "input_lower[{i}] = {} exceeds input_upper[{i}] = {}",
                input_lower[i], input_upper[i]
            )));
        }
        if let Some(l) = &labels {
            if l.len() != width {
                return Err(Error::shape(
                    None,
                    format!("{} labels for {width} outputs", l.len()),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            input_dim,
            layers,
            input_lower,
            input_upper,
            labels,
            affines,
        })
    }

    /// Network over the default `[0,1]^d` input box built from affine maps with
    /// ReLUs between consecutive maps.
    pub fn from_affines(name: impl Into<String>, affines: Vec<Affine>) -> Result<Self> {
        let input_dim = affines.first().map(|a| a.cols).unwrap_or(0);
        let mut layers = Vec::with_capacity(affines.len() * 2);
        let n = affines.len();
        for (i, a) in affines.into_iter().enumerate() {
            let rows = a.rows;
            layers.push(Layer::Affine(a));
            if i + 1 < n {
                layers.push(Layer::Relu { width: rows });
            }
        }
        Network::new(
            name,
            input_dim,
            layers,
            vec![0.0; input_dim],
            vec![1.0; input_dim],
            None,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_lower(&self) -> &[f64] {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &[f64] {
        &self.input_upper
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.affine(self.affines.len() - 1).rows
    }

    /// Affine maps in order; there is one more of them than ReLU layers.
    pub fn affine(&self, i: usize) -> &Affine {
        match &self.layers[self.affines[i]] {
            Layer::Affine(a) => a,
            Layer::Relu { .. } => unreachable!("affine index points at a relu layer"),
        }
    }

    pub fn num_affine(&self) -> usize {
        self.affines.len()
    }

    pub fn num_relu_layers(&self) -> usize {
        self.affines.len() - 1
    }

    pub fn relu_width(&self, layer: usize) -> usize {
        self.affine(layer).rows
    }

    pub fn num_relus(&self) -> usize {
        (0..self.num_relu_layers()).map(|l| self.relu_width(l)).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape(
                None,
                format!("input has length {}, network expects {}", x.len(), self.input_dim),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        self.check_input(x)?;
        Ok(Logits(self.forward_unchecked(x)))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for i in 0..self.num_affine() {
            h = self.affine(i).apply(&h);
            if i + 1 < self.num_affine() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// Pre-activations of every ReLU layer plus the logits.
    pub(crate) fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut pre = Vec::with_capacity(self.num_relu_layers());
        let mut h = x.to_vec();
        for i in 0..self.num_affine() {
            let z = self.affine(i).apply(&h);
            if i + 1 < self.num_affine() {
                h = z.iter().map(|v| v.max(0.0)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        (pre, h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.argmax())
    }

    /// Input clamped into the global valid box.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_lower.iter().zip(&self.input_upper))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.into_network()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ModelDoc::from(self)).expect("model document serializes")
    }
}

/// Reads and validates a model document.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Network::from_json_str(&text)
}

/// Reads an input vector stored either as a JSON array or as one CSV row.
pub fn load_input(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_input(&text)
}

pub fn parse_input(text: &str) -> Result<Vec<f64>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| Error::Parse(e.to_string()));
    }
    let mut lines = trimmed.lines().filter(|l| !l.trim().is_empty());
    let row = lines
        .next()
        .ok_or_else(|| Error::Parse("empty input".into()))?;
    if lines.next().is_some() {
        return Err(Error::Parse("CSV input must be a single row".into()));
    }
    row.split(',')
        .map(|field| {
            field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad CSV field {field:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    name: String,
    input_dim: usize,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerDoc {
    Affine {
        rows: usize,
        cols: usize,
        weights: WeightsDoc,
        bias: Vec<f64>,
    },
    Relu {},
}

/// Weights are written flat (row-major); nested row lists are accepted on read.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum WeightsDoc {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl ModelDoc {
    fn into_network(self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut width = self.input_dim;
        for (idx, layer) in self.layers.into_iter().enumerate() {
            match layer {
                LayerDoc::Affine {
                    rows,
                    cols,
                    weights,
                    bias,
                } => {
                    let weights = match weights {
                        WeightsDoc::Flat(w) => w,
                        WeightsDoc::Nested(rows_vec) => {
                            if rows_vec.len() != rows || rows_vec.iter().any(|r| r.len() != cols) {
                                return Err(Error::shape(
                                    idx,
                                    format!("nested weights do not form a {rows}x{cols} matrix"),
                                ));
                            }
                            rows_vec.into_iter().flatten().collect()
                        }
                    };
                    let affine = Affine::new(rows, cols, weights, bias).map_err(|e| match e {
                        Error::Shape { message, .. } => Error::shape(idx, message),
                        other => other,
                    })?;
                    width = rows;
                    layers.push(Layer::Affine(affine));
                }
                LayerDoc::Relu {} => layers.push(Layer::Relu { width }),
            }
        }
        Network::new(
            self.name,
            self.input_dim,
            layers,
            self.input_lower,
            self.input_upper,
            self.labels,
        )
    }
}

impl From<&Network> for ModelDoc {
    fn from(net: &Network) -> Self {
        ModelDoc {
            name: net.name.clone(),
            input_dim: net.input_dim,
            input_lower: net.input_lower.clone(),
            input_upper: net.input_upper.clone(),
            labels: net.labels.clone(),
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Affine(a) => LayerDoc::Affine {
                        rows: a.rows,
                        cols: a.cols,
                        weights: WeightsDoc::Flat(a.weights.clone()),
                        bias: a.bias.clone(),
                    },
                    Layer::Relu { .. } => LayerDoc::Relu {},
                })
                .collect(),
        }
    }
}
