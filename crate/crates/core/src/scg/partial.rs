use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{topo_sort, CausalGraph, GraphError};

/// A node of a coarsened graph: one or more variables treated as a vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub members: Vec<String>,
    pub latent: bool,
}

/// Graph over variable groups. Only used to shape model factorizations;
/// mechanisms are not carried over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupGraph {
    pub groups: Vec<Group>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl GroupGraph {
    /// Identity coarsening: one group per variable.
    pub fn from_graph(graph: &CausalGraph) -> Result<Self, GraphError> {
        let grouping = graph
            .variables
            .iter()
            .map(|v| (v.name.clone(), v.name.clone()))
            .collect();
        partial_graph(graph, &grouping)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn parents(&self, g: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, c)| *c == g).map(|(p, _)| *p).collect()
    }

    pub fn children(&self, g: usize) -> Vec<usize> {
        self.edges.iter().filter(|(p, _)| *p == g).map(|(_, c)| *c).collect()
    }

    pub fn topological_order(&self) -> Vec<usize> {
        topo_sort(self.groups.len(), &self.edges).expect("group graphs are acyclic by construction")
    }

    /// Edges as `(parent-name, child-name)` pairs.
    pub fn named_edges(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|&(p, c)| (self.groups[p].name.clone(), self.groups[c].name.clone()))
            .collect()
    }
}

/// Merge variables into groups; edges between groups are deduplicated and
/// intra-group edges dropped.
pub fn partial_graph(
    graph: &CausalGraph,
    grouping: &BTreeMap<String, String>,
) -> Result<GroupGraph, GraphError> {
    graph.edge_indices()?;
    let mut groups: Vec<Group> = Vec::new();
    let mut group_of = Vec::with_capacity(graph.variables.len());
    for v in &graph.variables {
        let g = grouping
            .get(&v.name)
            .ok_or_else(|| GraphError::UngroupedVariable(v.name.clone()))?;
        let idx = match groups.iter().position(|x| &x.name == g) {
            Some(idx) => {
                if groups[idx].latent != v.latent {
                    return Err(GraphError::MixedLatentGroup(g.clone()));
                }
                groups[idx].members.push(v.name.clone());
                idx
            }
            None => {
                groups.push(Group { name: g.clone(), members: vec![v.name.clone()], latent: v.latent });
                groups.len() - 1
            }
        };
        group_of.push(idx);
    }
    let mut edges = BTreeSet::new();
    for (p, c) in &graph.edges {
        let gp = group_of[graph.index_of(p).expect("checked")];
        let gc = group_of[graph.index_of(c).expect("checked")];
        if gp != gc {
            edges.insert((gp, gc));
        }
    }
    topo_sort(groups.len(), &edges)
        .map_err(|cycle| GraphError::QuotientCycle(cycle.into_iter().map(|i| groups[i].name.clone()).collect()))?;
    Ok(GroupGraph { groups, edges })
}
