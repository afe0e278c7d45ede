//! The morph cascade: layers of fused samples over the enrolment gallery.
//!
//! Layer 0 holds the roots (capacity `n1`), each following layer halves the
//! capacity down to 2-subject morphs, and the gallery references form the
//! implicit final layer. A cascade with first-level capacity `n1` therefore
//! has `log2(n1) + 1` levels.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{format_err, invalid, Error, Result};
use crate::io::{read_exact, read_u32, read_u64, read_values, write_values, Precision};
use crate::modality::{Comparator, Fuser};
use crate::pairing::{pair_hierarchy, rounds_for_capacity, PairingMethod};
use crate::sample::{Gallery, SampleVector, SubjectId};

pub const INDEX_MAGIC: &[u8; 8] = b"MIDXCASC";

#[derive(Debug, Clone, PartialEq)]
pub struct MorphNode {
    pub fused: SampleVector,
    /// Sorted ascending.
    pub members: Vec<SubjectId>,
    /// Offsets into the next layer; empty on the last morph layer, whose
    /// members point straight at references.
    pub children: Vec<usize>,
    /// 1 for roots.
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeIndex {
    pub n1: usize,
    pub dim: usize,
    pub method_fingerprint: String,
    pub gallery_digest: [u8; 32],
    pub layers: Vec<Vec<MorphNode>>,
    pub references: Vec<SampleVector>,
}

impl CascadeIndex {
    /// Levels including the reference layer.
    pub fn level_count(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn n_subjects(&self) -> usize {
        self.references.len()
    }

    pub fn roots(&self) -> &[MorphNode] {
        &self.layers[0]
    }

    pub fn layer_capacity(&self, layer: usize) -> usize {
        self.n1 >> layer
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    /// Fails when the index was built from a different gallery or method.
    pub fn check_compatible(&self, gallery: &Gallery, method: Option<&PairingMethod>) -> Result<()> {
        if gallery.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: gallery.dim() });
        }
        if gallery_digest(gallery.references()) != self.gallery_digest {
            return Err(invalid("index was built from a different gallery"));
        }
        if let Some(m) = method {
            if m.fingerprint() != self.method_fingerprint {
                return Err(invalid(format!(
                    "index built with pairing {:?}, expected {:?}",
                    self.method_fingerprint,
                    m.fingerprint()
                )));
            }
        }
        Ok(())
    }
}

pub fn gallery_digest(references: &[SampleVector]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((references.len() as u64).to_le_bytes());
    for r in references {
        h.update((r.dim() as u64).to_le_bytes());
        for v in r.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Builds the cascade bottom-up: pairs of subjects are fused into 2-morphs,
/// which are paired and fused into 4-morphs, and so on up to `n1`.
pub fn build_index<C: Comparator + ?Sized, F: Fuser + ?Sized>(
    gallery: &Gallery,
    method: &PairingMethod,
    n1: usize,
    comparator: &C,
    fuser: &F,
) -> Result<CascadeIndex> {
    let n_rounds = rounds_for_capacity(n1)?;
    let hierarchy = pair_hierarchy(gallery, method, n1, comparator, fuser)?;
    let mut layers: Vec<Vec<MorphNode>> = Vec::with_capacity(n_rounds);
    let mut prev_fused: Vec<SampleVector> = Vec::new();
    for round in 0..n_rounds {
        let layer_idx = n_rounds - 1 - round;
        let groups = &hierarchy.rounds[round];
        let fused = groups
            .par_iter()
            .enumerate()
            .map(|(g, children)| {
                let parents: Vec<&SampleVector> = if round == 0 {
                    children.iter().map(|&s| &gallery.references()[s]).collect()
                } else {
                    children.iter().map(|&c| &prev_fused[c]).collect()
                };
                fuser.fuse(&parents).map_err(|e| {
                    Error::DegenerateFusion(format!(
                        "layer {layer_idx} group {g} (members {:?}): {e}",
                        hierarchy.members[round][g].iter().map(|m| m.0).collect::<Vec<_>>()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let nodes = groups
            .iter()
            .zip(&hierarchy.members[round])
            .zip(&fused)
            .map(|((children, members), f)| MorphNode {
                fused: f.clone(),
                members: members.clone(),
                children: if round == 0 { Vec::new() } else { children.clone() },
                level: layer_idx + 1,
            })
            .collect();
        layers.push(nodes);
        prev_fused = fused;
    }
    layers.reverse();
    Ok(CascadeIndex {
        n1,
        dim: gallery.dim(),
        method_fingerprint: method.fingerprint(),
        gallery_digest: gallery_digest(gallery.references()),
        layers,
        references: gallery.references().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of the cascade.
pub fn validate_index(index: &CascadeIndex) -> ValidationReport {
    let mut v = Vec::new();
    let n = index.n_subjects();
    match rounds_for_capacity(index.n1) {
        Ok(r) if r == index.layers.len() => {}
        Ok(r) => v.push(format!("n1 = {} needs {r} morph layers, found {}", index.n1, index.layers.len())),
        Err(e) => v.push(e.to_string()),
    }
    if index.layers.is_empty() {
        v.push("index has no morph layers".into());
        return ValidationReport { violations: v };
    }
    let all: Vec<SubjectId> = (0..n as u32).map(SubjectId).collect();
    let last = index.layers.len() - 1;
    for (c, layer) in index.layers.iter().enumerate() {
        let cap = index.layer_capacity(c);
        let expected_len = if c == last {
            n.div_ceil(2)
        } else {
            index.layers[c + 1].len().div_ceil(2)
        };
        if layer.len() != expected_len {
            v.push(format!("layer {c} has {} nodes, expected {expected_len}", layer.len()));
        }
        let mut members: Vec<SubjectId> = layer.iter().flat_map(|m| m.members.iter().copied()).collect();
        members.sort();
        if members != all {
            let mut seen = BTreeSet::new();
            let dups: Vec<u32> = members.iter().filter(|m| !seen.insert(**m)).map(|m| m.0).collect();
            v.push(format!(
                "layer {c} members do not partition the {n} subjects (duplicates {dups:?}, {} listed)",
                members.len()
            ));
        }
        let mut linked = vec![0usize; if c == last { 0 } else { index.layers[c + 1].len() }];
        for (i, node) in layer.iter().enumerate() {
            let name = format!("layer {c} node {i}");
            if node.level != c + 1 {
                v.push(format!("{name} has level {}, expected {}", node.level, c + 1));
            }
            if node.members.is_empty() || node.members.len() > cap {
                v.push(format!("{name} has {} members, capacity {cap}", node.members.len()));
            }
            if node.members.iter().any(|m| m.index() >= n) {
                v.push(format!("{name} references an unknown subject"));
            }
            if node.fused.dim() != index.dim {
                v.push(format!("{name} has dimension {}, expected {}", node.fused.dim(), index.dim));
            }
            if c == last {
                if !node.children.is_empty() {
                    v.push(format!("{name} on the last morph layer has children"));
                }
                continue;
            }
            if node.children.is_empty() {
                v.push(format!("{name} has no children"));
            }
            let mut union = Vec::new();
            for &ch in &node.children {
                match index.layers[c + 1].get(ch) {
                    Some(child) => {
                        linked[ch] += 1;
                        union.extend(child.members.iter().copied());
                    }
                    None => v.push(format!("{name} links missing child {ch}")),
                }
            }
            union.sort();
            if union != node.members {
                v.push(format!("{name} members differ from the union of its children"));
            }
        }
        for (ch, count) in linked.iter().enumerate() {
            if *count != 1 {
                v.push(format!("layer {} node {ch} is linked from {count} parents", c + 1));
            }
        }
    }
    if index.references.iter().any(|r| r.dim() != index.dim) {
        v.push("reference layer dimension disagrees with index".into());
    }
    ValidationReport { violations: v }
}

pub fn save_index(index: &CascadeIndex, path: &Path, precision: Precision) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(index, &mut w, precision)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<CascadeIndex> {
    read_index(BufReader::new(File::open(path)?))
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_index<W: Write>(index: &CascadeIndex, w: &mut W, precision: Precision) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&precision.version().to_le_bytes())?;
    put_u32(w, index.dim)?;
    w.write_all(&(index.n_subjects() as u64).to_le_bytes())?;
    put_u32(w, index.n1)?;
    put_u32(w, index.method_fingerprint.len())?;
    w.write_all(index.method_fingerprint.as_bytes())?;
    w.write_all(&index.gallery_digest)?;
    put_u32(w, index.layers.len())?;
    for layer in &index.layers {
        w.write_all(&(layer.len() as u64).to_le_bytes())?;
        for node in layer {
            put_u32(w, node.members.len())?;
            for m in &node.members {
                w.write_all(&m.0.to_le_bytes())?;
            }
            put_u32(w, node.children.len())?;
            for &c in &node.children {
                put_u32(w, c)?;
            }
            write_values(w, node.fused.values(), precision)?;
        }
    }
    for r in &index.references {
        write_values(w, r.values(), precision)?;
    }
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<CascadeIndex> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(format_err("bad index magic bytes"));
    }
    let precision = Precision::from_version(read_u32(&mut r)?)?;
    let dim = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let n1 = read_u32(&mut r)? as usize;
    rounds_for_capacity(n1).map_err(|e| format_err(e.to_string()))?;
    if dim == 0 || n < 2 {
        return Err(format_err(format!("invalid dimension {dim} or subject count {n}")));
    }
    let fp_len = read_u32(&mut r)? as usize;
    if fp_len > 4096 {
        return Err(format_err("method fingerprint too long"));
    }
    let mut fp = vec![0u8; fp_len];
    read_exact(&mut r, &mut fp)?;
    let method_fingerprint = String::from_utf8(fp).map_err(|_| format_err("fingerprint is not UTF-8"))?;
    let mut gallery_digest = [0u8; 32];
    read_exact(&mut r, &mut gallery_digest)?;
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers > 8 {
        return Err(format_err(format!("implausible layer count {n_layers}")));
    }
    let vector = |r: &mut R| -> Result<SampleVector> {
        SampleVector::new(read_values(r, dim, precision)?).map_err(|e| format_err(e.to_string()))
    };
    let mut layers = Vec::with_capacity(n_layers);
    for c in 0..n_layers {
        let count = read_u64(&mut r)? as usize;
        if count > n {
            return Err(format_err(format!("layer {c} declares {count} nodes for {n} subjects")));
        }
        let mut layer = Vec::with_capacity(count);
        for _ in 0..count {
            let m = read_u32(&mut r)? as usize;
            if m > n {
                return Err(format_err("node member count exceeds subject count"));
            }
            let members = (0..m).map(|_| read_u32(&mut r).map(SubjectId)).collect::<Result<Vec<_>>>()?;
            let k = read_u32(&mut r)? as usize;
            if k > n {
                return Err(format_err("node child count exceeds subject count"));
            }
            let children = (0..k).map(|_| read_u32(&mut r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
            layer.push(MorphNode { fused: vector(&mut r)?, members, children, level: c + 1 });
        }
        layers.push(layer);
    }
    let references = (0..n).map(|_| vector(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing data after index"));
    }
    Ok(CascadeIndex { n1, dim, method_fingerprint, gallery_digest, layers, references })
}
