use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Graph, Node, NodeId};
use crate::error::{Error, Result};
use crate::model::KLayout;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct ConstRef {
    node: NodeId,
    /// Byte offset into the sidecar file.
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    schema: u32,
    k_layout: KLayout,
    history: Vec<String>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    nodes: Vec<Node>,
    constants: Vec<ConstRef>,
    bin: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Write `path` (JSON) plus a `.bin` sidecar holding constants as f32le.
pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let mut bin = Vec::new();
    let mut constants = Vec::new();
    for (&node, t) in g.constants() {
        constants.push(ConstRef {
            node,
            offset: bin.len(),
            numel: t.numel(),
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = sidecar(path);
    let file = GraphFile {
        schema: 1,
        k_layout: g.k_layout(),
        history: g.history().to_vec(),
        inputs: g.inputs().to_vec(),
        outputs: g.outputs().to_vec(),
        nodes: g.nodes().to_vec(),
        constants,
        bin: bin_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    fs::write(bin_path, bin)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let file: GraphFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.schema != 1 {
        return Err(Error::Graph(format!("unsupported graph schema {}", file.schema)));
    }
    let bin = fs::read(path.with_file_name(&file.bin))?;
    let mut g = Graph {
        nodes: file.nodes,
        inputs: file.inputs,
        outputs: file.outputs,
        k_layout: file.k_layout,
        history: file.history,
        ..Graph::default()
    };
    for c in file.constants {
        let end = c.offset + c.numel * 4;
        let shape = g
            .nodes
            .get(c.node)
            .map(|n| n.shape.clone())
            .ok_or_else(|| Error::Graph(format!("constant for unknown node {}", c.node)))?;
        let bytes = bin
            .get(c.offset..end)
            .ok_or_else(|| Error::Graph(format!("constant {} out of sidecar bounds", c.node)))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        g.constants.insert(c.node, Tensor::new(shape, data)?);
    }
    g.validate()?;
    Ok(g)
}
