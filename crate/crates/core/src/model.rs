//! The partitioned classifier.
//!
//! Layout: `pre` layers, then the distraction block, then the `head`, whose
//! last layer is a single sigmoid unit. Weights of the distraction block form
//! the distraction set; everything else is the classifier set. The block maps
//! the wrapped width back onto itself, so any depth ≥ 1 slots in unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::None => x,
        }
    }

    pub fn at_zero(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.5,
            _ => 0.0,
        }
    }
}

/// Which player owns a parameter.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Classifier,
    Distraction,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Pre,
    Distraction,
    Head,
}

impl Section {
    pub fn role(self) -> Role {
        match self {
            Section::Distraction => Role::Distraction,
            Section::Pre | Section::Head => Role::Classifier,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

/// Stable identity of a parameter tensor within one model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub role: Role,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub section: Section,
    pub weight: ParamId,
    pub bias: ParamId,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_depth() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input features.
    pub input_dim: usize,
    /// Widths of the fully connected layers before the distraction block.
    pub pre_widths: Vec<usize>,
    #[serde(default = "default_depth")]
    pub distraction_depth: usize,
    /// Must equal the width the block wraps (last pre width, or the input
    /// width when there are no pre layers). Derived when absent.
    #[serde(default)]
    pub distraction_width: Option<usize>,
    /// Hidden widths between the distraction block and the output unit.
    #[serde(default)]
    pub head_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Activation inside the distraction block; defaults to `activation`.
    #[serde(default)]
    pub distraction_activation: Option<Activation>,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    /// Two layers before the block, one distraction layer, one output layer.
    pub fn adult(input_dim: usize) -> Self {
        Self {
            input_dim,
            pre_widths: vec![32, 32],
            distraction_depth: 1,
            distraction_width: None,
            head_widths: Vec::new(),
            activation: Activation::Relu,
            distraction_activation: None,
            init_seed: 0,
        }
    }

    /// Same as [`ModelConfig::adult`] but with a three-layer distraction block.
    pub fn health(input_dim: usize) -> Self {
        Self {
            distraction_depth: 3,
            ..Self::adult(input_dim)
        }
    }

    pub fn wrapped_width(&self) -> usize {
        self.pre_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if let Some(i) = self.pre_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("pre_widths[{i}] is zero")));
        }
        if let Some(i) = self.head_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("head_widths[{i}] is zero")));
        }
        if self.distraction_depth == 0 {
            return Err(Error::Config("distraction_depth must be at least 1".into()));
        }
        match self.distraction_width {
            Some(0) => return Err(Error::Config("distraction_width is zero".into())),
            Some(w) if w != self.wrapped_width() => {
                return Err(Error::Config(format!(
                    "distraction_width {w} must equal the wrapped layer width {}",
                    self.wrapped_width()
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Layer shapes in forward order.
    pub fn layer_specs(&self) -> Vec<(Section, LayerSpec)> {
        let mut specs = Vec::new();
        let mut width = self.input_dim;
        for &w in &self.pre_widths {
            specs.push((
                Section::Pre,
                LayerSpec {
                    in_width: width,
                    out_width: w,
                    activation: self.activation,
                },
            ));
            width = w;
        }
        let act = self.distraction_activation.unwrap_or(self.activation);
        for _ in 0..self.distraction_depth {
            specs.push((
                Section::Distraction,
                LayerSpec {
                    in_width: width,
                    out_width: width,
                    activation: act,
                },
            ));
        }
        for &w in &self.head_widths {
            specs.push((
                Section::Head,
                LayerSpec {
                    in_width: width,
                    out_width: w,
                    activation: self.activation,
                },
            ));
            width = w;
        }
        // The sigmoid is applied by `forward`, which keeps the logits around.
        specs.push((
            Section::Head,
            LayerSpec {
                in_width: width,
                out_width: 1,
                activation: Activation::None,
            },
        ));
        specs
    }
}

/// Which parameters are graph leaves that collect gradients.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Only(Role),
    Nothing,
}

impl Trainable {
    fn includes(self, role: Role) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Only(r) => r == role,
            Trainable::Nothing => false,
        }
    }
}

/// One recorded forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    /// Leaf node of each parameter, indexed by [`ParamId`].
    pub param_nodes: Vec<NodeId>,
    /// Activations entering the head (output of the distraction block).
    pub embedding: NodeId,
    /// `m×1` pre-sigmoid scores.
    pub logits: NodeId,
    /// `m×1` probabilities.
    pub probs: NodeId,
}

impl ForwardPass {
    pub fn param_node(&self, id: ParamId) -> NodeId {
        self.param_nodes[id.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedModel {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::new(fan_in, fan_out, data).expect("sized by construction")
}

pub fn build_model(cfg: &ModelConfig) -> Result<PartitionedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut params = Vec::new();
    let mut layers = Vec::new();
    let mut counters = [0usize; 3];
    for (section, spec) in cfg.layer_specs() {
        let slot = section as usize;
        let prefix = match section {
            Section::Pre => "pre",
            Section::Distraction => "distraction",
            Section::Head => "head",
        };
        let idx = counters[slot];
        counters[slot] += 1;
        let weight = ParamId(params.len());
        params.push(Param {
            id: weight,
            name: format!("{prefix}.{idx}.weight"),
            role: section.role(),
            value: glorot_uniform(&mut rng, spec.in_width, spec.out_width),
        });
        let bias = ParamId(params.len());
        params.push(Param {
            id: bias,
            name: format!("{prefix}.{idx}.bias"),
            role: section.role(),
            value: Matrix::zeros(1, spec.out_width),
        });
        layers.push(Layer {
            spec,
            section,
            weight,
            bias,
        });
    }
    Ok(PartitionedModel {
        config: cfg.clone(),
        layers,
        params,
    })
}

impl PartitionedModel {
    /// Reassembles a model from stored tensors, checking every shape against
    /// the configuration.
    pub fn from_parts(config: ModelConfig, tensors: Vec<(String, Role, Matrix)>) -> Result<Self> {
        let mut model = build_model(&config)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (param, (name, role, value)) in model.params.iter_mut().zip(tensors) {
            if param.name != name || param.role != role || param.value.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "tensor {name} ({role:?}, {:?}) does not match {} ({:?}, {:?})",
                    value.shape(),
                    param.name,
                    param.role,
                    param.value.shape()
                )));
            }
            param.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Mutable views of the listed tensors; `ids` must be strictly ascending.
    pub fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Matrix> {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let mut wanted = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for p in &mut self.params {
            if wanted.peek() == Some(&&p.id) {
                wanted.next();
                out.push(&mut p.value);
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(classifier ids, distraction ids)` in construction order.
    pub fn partition_params(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let pick = |role| {
            self.params
                .iter()
                .filter(|p| p.role == role)
                .map(|p| p.id)
                .collect()
        };
        (pick(Role::Classifier), pick(Role::Distraction))
    }

    pub fn params_with_role(&self, role: Role) -> Vec<ParamId> {
        let (c, d) = self.partition_params();
        match role {
            Role::Classifier => c,
            Role::Distraction => d,
        }
    }

    /// Records a forward pass over `x` (`m×d`).
    pub fn forward_pass(&self, x: &Matrix, trainable: Trainable) -> Result<ForwardPass> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: x.shape(),
                right: (self.config.input_dim, 0),
            });
        }
        let mut graph = Graph::new();
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable.includes(p.role) {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        let mut h = graph.constant(x.clone());
        let mut embedding = h;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = graph.matmul(h, param_nodes[layer.weight.0])?;
            let z = graph.add_row(z, param_nodes[layer.bias.0])?;
            h = layer.spec.activation.apply(&mut graph, z);
            if i < last && self.layers[i + 1].section == Section::Head && layer.section != Section::Head
            {
                embedding = h;
            }
        }
        let logits = h;
        let probs = graph.sigmoid(logits);
        Ok(ForwardPass {
            graph,
            param_nodes,
            embedding,
            logits,
            probs,
        })
    }

    /// Records a forward pass with every parameter trainable.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        self.forward_pass(x, Trainable::All)
    }

    /// Probabilities for every row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let pass = self.forward_pass(x, Trainable::Nothing)?;
        Ok(pass.graph.value(pass.probs).as_slice().to_vec())
    }

    /// Activations entering the head, one row per sample.
    pub fn export_embeddings(&self, x: &Matrix) -> Result<Matrix> {
        let pass = self.forward_pass(x, Trainable::Nothing)?;
        Ok(pass.graph.value(pass.embedding).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(d: usize) -> ModelConfig {
        ModelConfig {
            input_dim: d,
            pre_widths: vec![8],
            distraction_depth: 1,
            distraction_width: None,
            head_widths: vec![],
            activation: Activation::Relu,
            distraction_activation: None,
            init_seed: 3,
        }
    }

    fn zeroed(mut model: PartitionedModel) -> PartitionedModel {
        for p in &mut model.params {
            p.value.as_mut_slice().fill(0.0);
        }
        model
    }

    #[test]
    fn adult_preset_layer_counts() {
        let model = build_model(&ModelConfig::adult(10)).unwrap();
        let count = |s| model.layers().iter().filter(|l| l.section == s).count();
        assert_eq!(count(Section::Pre), 2);
        assert_eq!(count(Section::Distraction), 1);
        assert_eq!(count(Section::Head), 1);
    }

    #[test]
    fn health_preset_layer_counts() {
        let model = build_model(&ModelConfig::health(10)).unwrap();
        let count = |s| model.layers().iter().filter(|l| l.section == s).count();
        assert_eq!(count(Section::Pre), 2);
        assert_eq!(count(Section::Distraction), 3);
        assert_eq!(count(Section::Head), 1);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // d=4, pre width 8, distraction 8->8, output 8->1
        let model = build_model(&small(4)).unwrap();
        assert_eq!(model.parameter_count(), 4 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
    }

    #[test]
    fn zero_widths_are_rejected() {
        let mut cfg = small(4);
        cfg.pre_widths = vec![0];
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
        let mut cfg = small(0);
        cfg.pre_widths = vec![4];
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
        let mut cfg = small(4);
        cfg.distraction_depth = 0;
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_distraction_width_is_rejected() {
        let mut cfg = small(4);
        cfg.distraction_width = Some(5);
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
        cfg.distraction_width = Some(8);
        assert!(build_model(&cfg).is_ok());
    }

    #[test]
    fn adult_distraction_set_is_one_weight_and_bias() {
        let model = build_model(&ModelConfig::adult(10)).unwrap();
        let (_, theta_d) = model.partition_params();
        let names: Vec<_> = theta_d.iter().map(|&id| model.param(id).name.as_str()).collect();
        assert_eq!(names, ["distraction.0.weight", "distraction.0.bias"]);
    }

    #[test]
    fn partition_is_disjoint_exhaustive_and_stable() {
        for depth in 1..=3 {
            let mut cfg = small(5);
            cfg.distraction_depth = depth;
            let model = build_model(&cfg).unwrap();
            let (c, d) = model.partition_params();
            assert_eq!(c.len() + d.len(), model.params().len());
            let cs: HashSet<_> = c.iter().collect();
            assert!(d.iter().all(|id| !cs.contains(id)));
            assert_eq!(d.len(), 2 * depth);
            assert_eq!(model.partition_params(), (c, d));
        }
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let model = zeroed(build_model(&small(3)).unwrap());
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(model.predict(&x).unwrap(), vec![0.5, 0.5]);
        let emb = model.export_embeddings(&x).unwrap();
        assert_eq!(emb.shape(), (2, 8));
        assert!(emb.as_slice().iter().all(|&v| v == Activation::Relu.at_zero()));
    }

    #[test]
    fn output_shape_and_range() {
        let model = build_model(&small(3)).unwrap();
        for m in [1, 2, 7] {
            let x = Matrix::filled(m, 3, 0.7);
            let pass = model.forward(&x).unwrap();
            let s = pass.graph.value(pass.probs);
            assert_eq!(s.shape(), (m, 1));
            assert!(s.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let model = build_model(&small(3)).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.1, 0.2, 0.3]]).unwrap();
        let s = model.predict(&x).unwrap();
        assert_eq!(s[0].to_bits(), s[2].to_bits());
        let e = model.export_embeddings(&x).unwrap();
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn embedding_width_is_distraction_width() {
        let mut cfg = small(3);
        cfg.head_widths = vec![4];
        let model = build_model(&cfg).unwrap();
        let e = model.export_embeddings(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(e.cols(), 8);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let model = build_model(&small(3)).unwrap();
        assert!(matches!(
            model.predict(&Matrix::zeros(2, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn same_seed_same_model() {
        let a = build_model(&small(3)).unwrap();
        let b = build_model(&small(3)).unwrap();
        assert_eq!(a, b);
        let mut cfg = small(3);
        cfg.init_seed = 4;
        assert_ne!(a, build_model(&cfg).unwrap());
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let model = build_model(&small(4)).unwrap();
        for layer in model.layers() {
            let limit = (6.0 / (layer.spec.in_width + layer.spec.out_width) as f64).sqrt();
            let w = &model.param(layer.weight).value;
            assert!(w.as_slice().iter().all(|v| v.abs() <= limit));
            assert!(model.param(layer.bias).value.as_slice().iter().all(|&v| v == 0.0));
        }
    }
}
