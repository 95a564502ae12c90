//! Graph JSON document. Weights are referenced by name and live in a
//! separate weight bundle.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

use super::{duplicate_ids, DataflowGraph, Edge, Node};

pub const GRAPH_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema: u32,
    name: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

pub fn serialize(g: &DataflowGraph) -> Vec<u8> {
    let doc = GraphDoc { schema: GRAPH_SCHEMA, name: g.name.clone(), nodes: g.nodes.clone(), edges: g.edges.clone() };
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("graph documents always serialize");
    bytes.push(b'\n');
    bytes
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    for (i, b) in bytes.iter().enumerate() {
        if current == line {
            return (i + column.saturating_sub(1)).min(bytes.len());
        }
        if *b == b'\n' {
            current += 1;
        }
    }
    bytes.len()
}

/// Parses a graph document. The result carries no weights.
pub fn deserialize(bytes: &[u8]) -> Result<DataflowGraph, GraphError> {
    let doc: GraphDoc = serde_json::from_slice(bytes).map_err(|e| GraphError::MalformedStream {
        offset: byte_offset(bytes, e.line(), e.column()),
        reason: e.to_string(),
    })?;
    if doc.schema != GRAPH_SCHEMA {
        return Err(GraphError::MalformedStream {
            offset: 0,
            reason: format!("unsupported schema {}", doc.schema),
        });
    }
    if let Some(id) = duplicate_ids(&doc.nodes).first() {
        return Err(GraphError::MalformedStream { offset: 0, reason: format!("duplicate node id {id}") });
    }
    Ok(super::from_parts(doc.name, doc.nodes, doc.edges))
}
