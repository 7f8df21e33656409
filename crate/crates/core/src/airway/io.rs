//! JSON airway tree files.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{AirwayError, AirwayTree, Branch};
use crate::geometry::{Frame, PointCloud};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    root_id: u32,
    branches: Vec<BranchRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchRecord {
    id: u32,
    label: String,
    generation: u32,
    parent_id: Option<u32>,
    centerline: Vec<[f64; 3]>,
    radii: Vec<f64>,
    cloud: Vec<[f64; 3]>,
}

fn to_points(v: Vec<[f64; 3]>) -> Vec<Vector3<f64>> {
    v.into_iter().map(Vector3::from).collect()
}

fn from_points(v: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

pub fn tree_to_json(tree: &AirwayTree) -> Result<String, AirwayError> {
    let file = TreeFile {
        root_id: tree.root_id(),
        branches: tree
            .branches()
            .iter()
            .map(|b| BranchRecord {
                id: b.id,
                label: b.anatomical_label.clone(),
                generation: b.generation,
                parent_id: b.parent_id,
                centerline: from_points(&b.centerline),
                radii: b.radii.clone(),
                cloud: from_points(&b.surface_cloud.points),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Parses and validates a tree document.
pub fn tree_from_json(text: &str) -> Result<AirwayTree, AirwayError> {
    let file: TreeFile = serde_json::from_str(text)?;
    let branches = file
        .branches
        .into_iter()
        .map(|r| Branch {
            id: r.id,
            anatomical_label: r.label,
            generation: r.generation,
            parent_id: r.parent_id,
            centerline: to_points(r.centerline),
            radii: r.radii,
            surface_cloud: PointCloud::new(to_points(r.cloud), Frame::World),
        })
        .collect();
    AirwayTree::new(branches, file.root_id)
}

pub fn save_tree(tree: &AirwayTree, path: impl AsRef<Path>) -> Result<(), AirwayError> {
    fs::write(path, tree_to_json(tree)?)?;
    Ok(())
}

pub fn load_tree(path: impl AsRef<Path>) -> Result<AirwayTree, AirwayError> {
    tree_from_json(&fs::read_to_string(path)?)
}
