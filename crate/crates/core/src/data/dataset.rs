//! Dataset directory layout:
//!
//! ```text
//! meta.json
//! slides/<id>/positions.f32    N × 2
//! slides/<id>/features.f32     N × D_e
//! slides/<id>/expression.f32   N × G   (columns in `genes` order)
//! genes/<name>/desc.f32        L × D_T (1 ≤ L ≤ L_max)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw::{file_len, read_f32, write_f32};
use crate::embedder::{GeneDescription, Split};
use crate::error::{Error, Result};
use crate::nd::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// One slide's windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideWindows {
    pub slide_id: String,
    /// `N × 2`
    pub positions: Tensor,
    /// `N × D_e`
    pub features: Tensor,
    /// `N × G`
    pub expression: Tensor,
}

impl SlideWindows {
    pub fn n(&self) -> usize {
        self.positions.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub slides: Vec<SlideWindows>,
    pub genes: Vec<GeneDescription>,
    pub d_e: usize,
    pub d_t: usize,
    pub l_max: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub id: String,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    #[serde(rename = "D_e")]
    pub d_e: usize,
    #[serde(rename = "D_T")]
    pub d_t: usize,
    #[serde(rename = "L_max")]
    pub l_max: usize,
    pub genes: Vec<String>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub slides: Vec<SlideMeta>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    let bad = name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\', '\0']);
    if bad {
        return Err(Error::Data(format!(
            "{kind} name {name:?} is not a valid path component"
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn gene_names(&self) -> Vec<String> {
        self.genes.iter().map(|g| g.gene.clone()).collect()
    }

    /// Column indices of genes in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.genes
            .iter()
            .enumerate()
            .filter(|(_, g)| g.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gene_index(&self, name: &str) -> Result<usize> {
        self.genes
            .iter()
            .position(|g| g.gene == name)
            .ok_or_else(|| Error::Lookup {
                kind: "gene",
                name: name.to_string(),
            })
    }

    pub fn slide(&self, id: &str) -> Result<&SlideWindows> {
        self.slides
            .iter()
            .find(|s| s.slide_id == id)
            .ok_or_else(|| Error::Lookup {
                kind: "slide",
                name: id.to_string(),
            })
    }

    pub fn meta(&self) -> Meta {
        let names_in = |split| {
            self.genes
                .iter()
                .filter(|g| g.split == split)
                .map(|g| g.gene.clone())
                .collect()
        };
        Meta {
            format_version: FORMAT_VERSION,
            d_e: self.d_e,
            d_t: self.d_t,
            l_max: self.l_max,
            genes: self.gene_names(),
            seen: names_in(Split::Seen),
            unseen: names_in(Split::Unseen),
            slides: self
                .slides
                .iter()
                .map(|s| SlideMeta {
                    id: s.slide_id.clone(),
                    n: s.n(),
                })
                .collect(),
        }
    }

    /// Structural and numeric checks shared by construction and loading.
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.d_t == 0 || self.l_max == 0 {
            return Err(Error::Data("D_e, D_T and L_max must be positive".into()));
        }
        let g = self.genes.len();
        let mut names = HashSet::new();
        for gene in &self.genes {
            check_name("gene", &gene.gene)?;
            if !names.insert(gene.gene.as_str()) {
                return Err(Error::Data(format!("duplicate gene {}", gene.gene)));
            }
            let (l, d_t) = gene.tokens.dims();
            if l == 0 || l > self.l_max || d_t != self.d_t {
                return Err(Error::Data(format!(
                    "description of {} has shape {:?}; need 1..={} rows of width {}",
                    gene.gene,
                    gene.tokens.shape(),
                    self.l_max,
                    self.d_t
                )));
            }
            if !gene.tokens.is_finite() {
                return Err(Error::Data(format!("non-finite tokens for {}", gene.gene)));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.slides {
            check_name("slide", &s.slide_id)?;
            if !ids.insert(s.slide_id.as_str()) {
                return Err(Error::Data(format!("duplicate slide {}", s.slide_id)));
            }
            let n = s.n();
            if n == 0 {
                return Err(Error::EmptySlide);
            }
            let want = [
                (s.positions.dims(), (n, 2)),
                (s.features.dims(), (n, self.d_e)),
                (s.expression.dims(), (n, g)),
            ];
            for (got, expected) in want {
                if got != expected {
                    return Err(Error::Data(format!(
                        "slide {}: tensor of shape {got:?}, expected {expected:?}",
                        s.slide_id
                    )));
                }
            }
            if !(s.positions.is_finite() && s.features.is_finite() && s.expression.is_finite()) {
                return Err(Error::Data(format!(
                    "slide {} has non-finite values",
                    s.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        for s in &self.slides {
            let sd = dir.join("slides").join(&s.slide_id);
            mkdir(&sd)?;
            write_f32(&sd.join("positions.f32"), s.positions.data())?;
            write_f32(&sd.join("features.f32"), s.features.data())?;
            write_f32(&sd.join("expression.f32"), s.expression.data())?;
        }
        for g in &self.genes {
            let gd = dir.join("genes").join(&g.gene);
            mkdir(&gd)?;
            write_f32(&gd.join("desc.f32"), g.tokens.data())?;
        }
        Ok(())
    }

    /// Loads and fully validates a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = match fs::read_to_string(&meta_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(meta_path))
            }
            Err(e) => return Err(Error::io(&meta_path, e)),
        };
        let meta: Meta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: meta_path.clone(),
            source,
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let split_of = split_map(&meta)?;

        let mut genes = Vec::with_capacity(meta.genes.len());
        for (name, split) in meta.genes.iter().zip(split_of) {
            check_name("gene", name)?;
            let path = dir.join("genes").join(name).join("desc.f32");
            let bytes = file_len(&path)?;
            let row_bytes = 4 * meta.d_t as u64;
            let rows = bytes.checked_div(row_bytes).unwrap_or(0);
            if row_bytes == 0
                || !bytes.is_multiple_of(row_bytes)
                || rows == 0
                || rows > meta.l_max as u64
            {
                return Err(Error::SizeMismatch {
                    path,
                    expected: row_bytes * meta.l_max as u64,
                    actual: bytes,
                });
            }
            let rows = rows as usize;
            let data = read_f32(&path, rows * meta.d_t)?;
            genes.push(GeneDescription {
                gene: name.clone(),
                tokens: Tensor::matrix(rows, meta.d_t, data)?,
                split,
            });
        }

        let g = meta.genes.len();
        let mut slides = Vec::with_capacity(meta.slides.len());
        for sm in &meta.slides {
            check_name("slide", &sm.id)?;
            let sd = dir.join("slides").join(&sm.id);
            let load = |file: &str, cols: usize| -> Result<Tensor> {
                let data = read_f32(&sd.join(file), sm.n * cols)?;
                Tensor::matrix(sm.n, cols, data)
            };
            slides.push(SlideWindows {
                slide_id: sm.id.clone(),
                positions: load("positions.f32", 2)?,
                features: load("features.f32", meta.d_e)?,
                expression: load("expression.f32", g)?,
            });
        }
        let ds = Dataset {
            slides,
            genes,
            d_e: meta.d_e,
            d_t: meta.d_t,
            l_max: meta.l_max,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Split label for each entry of `meta.genes`, checking that `seen` and
/// `unseen` are disjoint and together cover exactly the gene list.
fn split_map(meta: &Meta) -> Result<Vec<Split>> {
    let seen: HashSet<&str> = meta.seen.iter().map(String::as_str).collect();
    let unseen: HashSet<&str> = meta.unseen.iter().map(String::as_str).collect();
    if let Some(g) = meta.seen.iter().find(|g| unseen.contains(g.as_str())) {
        return Err(Error::OverlappingSplit(g.clone()));
    }
    let all: HashSet<&str> = meta.genes.iter().map(String::as_str).collect();
    if all.len() != meta.genes.len() {
        return Err(Error::Data("duplicate names in genes".into()));
    }
    if let Some(g) = seen.union(&unseen).find(|g| !all.contains(*g)) {
        return Err(Error::Data(format!("split lists unknown gene {g}")));
    }
    if seen.len() != meta.seen.len() || unseen.len() != meta.unseen.len() {
        return Err(Error::Data("duplicate names in split lists".into()));
    }
    meta.genes
        .iter()
        .map(|g| {
            if seen.contains(g.as_str()) {
                Ok(Split::Seen)
            } else if unseen.contains(g.as_str()) {
                Ok(Split::Unseen)
            } else {
                Err(Error::Data(format!("gene {g} is in neither split")))
            }
        })
        .collect()
}
