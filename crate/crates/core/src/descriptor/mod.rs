//! Network descriptors: layers and connections declared independently, by
//! name, then validated and compiled into an executable [`Network`].

mod network;

pub use network::{compile, Network};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LayerKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Named layers plus directed connections between them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Descriptor {
    layers: IndexMap<String, LayerSpec>,
    connections: Vec<(String, String)>,
    sequential_counter: usize,
}

impl Descriptor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a layer without connecting it.
    pub fn add_layer(&mut self, kind: LayerKind, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Declaration("layer names must be non-empty".into()));
        }
        if self.layers.contains_key(&name) {
            return Err(Error::Declaration(format!("duplicate layer name `{name}`")));
        }
        kind.check()?;
        self.layers.insert(name.clone(), LayerSpec { name, kind });
        Ok(())
    }

    /// Adds a directed edge `from -> to` between existing layers.
    pub fn connect(&mut self, from: &str, to: &str) -> Result<()> {
        for end in [from, to] {
            if !self.layers.contains_key(end) {
                return Err(Error::UnknownLayer(end.to_string()));
            }
        }
        if self.connections.iter().any(|(a, b)| a == from && b == to) {
            return Err(Error::Declaration(format!(
                "duplicate connection `{from}` -> `{to}`"
            )));
        }
        self.connections.push((from.to_string(), to.to_string()));
        Ok(())
    }

    /// Adds a layer named `<kind>_<index>` and connects the previously added
    /// layer to it. Returns the generated name.
    pub fn add_layer_sequential(&mut self, kind: LayerKind) -> Result<String> {
        let previous = self.layers.last().map(|(name, _)| name.clone());
        let mut index = self.sequential_counter.max(self.layers.len());
        let mut name = format!("{}_{index}", kind.tag());
        while self.layers.contains_key(&name) {
            index += 1;
            name = format!("{}_{index}", kind.tag());
        }
        self.sequential_counter = index + 1;
        self.add_layer(kind, name.clone())?;
        if let Some(prev) = previous {
            self.connect(&prev, &name)?;
        }
        Ok(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.values()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.get(name)
    }

    pub fn connections(&self) -> &[(String, String)] {
        &self.connections
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks the graph for cycles, a unique source and sink, and full
    /// reachability. Never fails; problems are listed in the report.
    pub fn validate(&self) -> ValidationReport {
        let n = self.layers.len();
        let mut failures = Vec::new();
        if n == 0 {
            failures.push(ValidationFailure::Empty);
            return ValidationReport {
                failures,
                topological_order: None,
                source: None,
                sink: None,
            };
        }
        let (succ, pred) = self.adjacency();

        // Kahn's algorithm; ready layers leave in declaration order.
        let mut indegree: Vec<usize> = pred.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        let acyclic = order.len() == n;
        if !acyclic {
            let stuck = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.name_at(i))
                .collect();
            failures.push(ValidationFailure::Cycle(stuck));
        }

        let sources: Vec<usize> = (0..n).filter(|&i| pred[i].is_empty()).collect();
        let sinks: Vec<usize> = (0..n).filter(|&i| succ[i].is_empty()).collect();
        if sources.len() != 1 {
            failures.push(ValidationFailure::SourceCount(
                sources.iter().map(|&i| self.name_at(i)).collect(),
            ));
        }
        if sinks.len() != 1 {
            failures.push(ValidationFailure::SinkCount(
                sinks.iter().map(|&i| self.name_at(i)).collect(),
            ));
        }
        let source = (sources.len() == 1).then(|| sources[0]);
        let sink = (sinks.len() == 1).then(|| sinks[0]);

        if let Some(s) = source {
            let seen = reach(&succ, s);
            let missing: Vec<String> = (0..n)
                .filter(|&i| !seen[i])
                .map(|i| self.name_at(i))
                .collect();
            if !missing.is_empty() {
                failures.push(ValidationFailure::Unreachable(missing));
            }
        }
        if let Some(t) = sink {
            let seen = reach(&pred, t);
            let missing: Vec<String> = (0..n)
                .filter(|&i| !seen[i])
                .map(|i| self.name_at(i))
                .collect();
            if !missing.is_empty() {
                failures.push(ValidationFailure::CannotReachSink(missing));
            }
        }

        let valid = failures.is_empty();
        ValidationReport {
            failures,
            topological_order: valid.then(|| order.iter().map(|&i| self.name_at(i)).collect()),
            source: source.map(|i| self.name_at(i)),
            sink: sink.map(|i| self.name_at(i)),
        }
    }

    /// Per-layer output shapes (without the batch axis), in topological order.
    pub fn infer_shapes(&self, input_shape: [usize; 3]) -> Result<Vec<(String, Vec<usize>)>> {
        let report = self.validate();
        let Some(order) = report.topological_order.clone() else {
            return Err(Error::Compile(format!(
                "invalid descriptor: {}",
                report.summary()
            )));
        };
        if input_shape.contains(&0) {
            return Err(Error::Compile(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        let mut shapes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut out = Vec::with_capacity(order.len());
        for name in &order {
            let spec = &self.layers[name.as_str()];
            let inbound: Vec<&Vec<usize>> = self
                .connections
                .iter()
                .filter(|(_, to)| to == name)
                .map(|(from, _)| &shapes[from.as_str()])
                .collect();
            let input = if inbound.is_empty() {
                input_shape.to_vec()
            } else {
                merged_shape(name, &inbound)?
            };
            let shape = layer_output_shape(name, &spec.kind, &input)?;
            shapes.insert(name.as_str(), shape.clone());
            out.push((name.clone(), shape));
        }
        Ok(out)
    }

    /// Trainable scalars of the network this descriptor compiles to.
    pub fn count_parameters(&self, input_shape: [usize; 3]) -> Result<usize> {
        self.infer_shapes(input_shape)?;
        Ok(self.layers.values().map(|l| l.kind.parameter_count()).sum())
    }

    /// Canonical JSON form, `{"layers": [...], "connections": [[from, to], ...]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("descriptor documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DescriptorDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn to_document(&self) -> DescriptorDocument {
        DescriptorDocument {
            layers: self
                .layers
                .values()
                .map(|l| LayerDocument {
                    name: l.name.clone(),
                    kind: l.kind.tag().to_string(),
                    params: l
                        .kind
                        .params()
                        .into_iter()
                        .map(|(k, v)| (k.to_string(), v))
                        .collect(),
                })
                .collect(),
            connections: self.connections.clone(),
        }
    }

    pub fn from_document(doc: &DescriptorDocument) -> Result<Self> {
        let mut desc = Descriptor::new();
        for layer in &doc.layers {
            let kind = LayerKind::from_parts(&layer.kind, |k| layer.params.get(k).copied())?;
            desc.add_layer(kind, layer.name.clone())?;
        }
        for (from, to) in &doc.connections {
            desc.connect(from, to)?;
        }
        desc.sequential_counter = desc.layers.len();
        Ok(desc)
    }

    /// 64-bit FNV-1a over [`Descriptor::to_json`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }

    fn name_at(&self, index: usize) -> String {
        self.layers
            .get_index(index)
            .expect("index in range")
            .0
            .clone()
    }

    fn adjacency(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n = self.layers.len();
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for (from, to) in &self.connections {
            let a = self
                .layers
                .get_index_of(from.as_str())
                .expect("checked on connect");
            let b = self
                .layers
                .get_index_of(to.as_str())
                .expect("checked on connect");
            succ[a].push(b);
            pred[b].push(a);
        }
        (succ, pred)
    }
}

fn reach(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn merged_shape(name: &str, inbound: &[&Vec<usize>]) -> Result<Vec<usize>> {
    let first = inbound[0];
    if inbound.len() == 1 {
        return Ok(first.clone());
    }
    for s in &inbound[1..] {
        if s.len() != first.len() || s[1..] != first[1..] {
            return Err(Error::Compile(format!(
                "cannot merge inputs of `{name}`: shapes {first:?} and {s:?} differ outside the channel axis"
            )));
        }
    }
    let mut merged = first.clone();
    merged[0] = inbound.iter().map(|s| s[0]).sum();
    Ok(merged)
}

fn layer_output_shape(name: &str, kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            ..
        } => {
            if input.len() != 3 {
                return Err(Error::Compile(format!(
                    "conv2d `{name}` needs a [C, H, W] input, got {input:?}"
                )));
            }
            if input[0] != in_channels {
                return Err(Error::Compile(format!(
                    "conv2d `{name}` declares {in_channels} input channels but receives {}",
                    input[0]
                )));
            }
            Ok(vec![out_channels, input[1], input[2]])
        }
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            if input.len() != 1 {
                return Err(Error::Compile(format!(
                    "dense `{name}` needs a flattened input, got {input:?}"
                )));
            }
            if input[0] != in_features {
                return Err(Error::Compile(format!(
                    "dense `{name}` declares {in_features} input features but receives {}",
                    input[0]
                )));
            }
            Ok(vec![out_features])
        }
        LayerKind::ReLU => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::SoftmaxCrossEntropy => {
            if input.len() != 1 {
                return Err(Error::Compile(format!(
                    "loss head `{name}` needs flattened logits, got {input:?}"
                )));
            }
            Ok(input.to_vec())
        }
    }
}

/// Why a descriptor failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationFailure {
    Empty,
    /// Layers left on a cycle (or downstream of one).
    Cycle(Vec<String>),
    /// Layers without inbound edges, when there is not exactly one.
    SourceCount(Vec<String>),
    SinkCount(Vec<String>),
    /// Layers not reachable from the source.
    Unreachable(Vec<String>),
    /// Layers from which the sink cannot be reached.
    CannotReachSink(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub failures: Vec<ValidationFailure>,
    pub topological_order: Option<Vec<String>>,
    pub source: Option<String>,
    pub sink: Option<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.failures
            .iter()
            .any(|f| matches!(f, ValidationFailure::Cycle(_)))
    }

    pub fn summary(&self) -> String {
        if self.failures.is_empty() {
            return "valid".into();
        }
        self.failures
            .iter()
            .map(|f| format!("{f:?}"))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Serialized layer entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorDocument {
    pub layers: Vec<LayerDocument>,
    pub connections: Vec<(String, String)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
