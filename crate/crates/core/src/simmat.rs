//! Similarity groups, the self-similarity matrix, its channel expansion and
//! the per-face tokens fed to the encoder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::numeric::{checked_norm, dot, matmul, matmul_nt, matmul_tn, Tensor};

/// Where a group slot's face came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberRef {
    /// Index of the image in the batch that was packed.
    pub batch_index: usize,
    pub image_id: String,
    pub face_index: usize,
}

/// A fixed-size set of faces drawn from whole images, padded and masked.
#[derive(Debug, Clone)]
pub struct SimilarityGroup {
    pub group_size: usize,
    pub members: Vec<Option<MemberRef>>,
    pub mask: Vec<bool>,
    /// `group_size × D`, zero rows on padding.
    pub features: Tensor,
    /// Per-slot labels; padding slots hold 0 and are ignored.
    pub labels: Vec<u8>,
    /// `(batch image index, first slot, face count)` for every packed image.
    pub images: Vec<(usize, usize, usize)>,
}

impl SimilarityGroup {
    pub fn live(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Number of unmasked real members.
    pub fn num_real(&self) -> usize {
        self.mask
            .iter()
            .zip(&self.labels)
            .filter(|(&m, &l)| m && l == 0)
            .count()
    }

    /// Number of unmasked fake members.
    pub fn num_fake(&self) -> usize {
        self.mask
            .iter()
            .zip(&self.labels)
            .filter(|(&m, &l)| m && l == 1)
            .count()
    }

    /// Builds a group directly from slot contents (used by tests and tools).
    pub fn from_slots(features: Tensor, labels: Vec<u8>, mask: Vec<bool>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows, {} labels, {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        Ok(SimilarityGroup {
            group_size: n,
            members: vec![None; n],
            images: Vec::new(),
            mask,
            features,
            labels,
        })
    }
}

/// Packs images, in batch order, into groups of `group_size` slots. An
/// image never straddles two groups; the tail of each group is padding.
pub fn build_groups(batch: &[ImageRecord], group_size: usize) -> Result<Vec<SimilarityGroup>> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group_size must be at least 2, got {group_size}"
        )));
    }
    let dim = batch
        .iter()
        .flat_map(|im| im.faces.first())
        .map(|f| f.feature.len())
        .next()
        .unwrap_or(0);
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut used = group_size;
    for (b, image) in batch.iter().enumerate() {
        let k = image.faces.len();
        if k > group_size {
            return Err(Error::Invalid(format!(
                "image {} has {k} faces, more than the group size {group_size}",
                image.image_id
            )));
        }
        if used + k > group_size {
            bins.push(Vec::new());
            used = 0;
        }
        bins.last_mut().expect("bin opened above").push(b);
        used += k;
    }
    bins.into_iter()
        .map(|bin| {
            let mut features = Tensor::zeros(&[group_size, dim]);
            let mut labels = vec![0u8; group_size];
            let mut mask = vec![false; group_size];
            let mut members = vec![None; group_size];
            let mut images = Vec::new();
            let mut slot = 0;
            for b in bin {
                let image = &batch[b];
                images.push((b, slot, image.faces.len()));
                for (fi, face) in image.faces.iter().enumerate() {
                    if face.feature.len() != dim {
                        return Err(Error::Shape(format!(
                            "face {} has dimension {}, batch uses {dim}",
                            face.face_id,
                            face.feature.len()
                        )));
                    }
                    features.row_mut(slot).copy_from_slice(&face.feature);
                    labels[slot] = face.label;
                    mask[slot] = true;
                    members[slot] = Some(MemberRef {
                        batch_index: b,
                        image_id: image.image_id.clone(),
                        face_index: fi,
                    });
                    slot += 1;
                }
            }
            Ok(SimilarityGroup {
                group_size,
                members,
                mask,
                features,
                labels,
                images,
            })
        })
        .collect()
}

/// Pairwise cosine similarity over the rows of `features`, zero wherever a
/// slot is masked and exactly one on the live diagonal.
pub fn similarity_matrix(features: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let n = features.rows();
    let mut norms = vec![0.0; n];
    for i in (0..n).filter(|&i| mask[i]) {
        norms[i] = checked_norm(features.row(i), &format!("feature in slot {i}"))?;
    }
    let mut s = Tensor::zeros(&[n, n]);
    for i in (0..n).filter(|&i| mask[i]) {
        s.data_mut()[i * n + i] = 1.0;
        for j in (i + 1..n).filter(|&j| mask[j]) {
            let c = (dot(features.row(i), features.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s.data_mut()[i * n + j] = c;
            s.data_mut()[j * n + i] = c;
        }
    }
    Ok(s)
}

pub fn build_simmat(group: &SimilarityGroup) -> Result<Tensor> {
    similarity_matrix(&group.features, &group.mask)
}

/// `C` correlation maps of size `n × n`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTensor {
    pub channels: usize,
    pub n: usize,
    pub maps: Vec<f64>,
}

impl SimTensor {
    pub fn map(&self, c: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.maps[c * nn..(c + 1) * nn]
    }
}

/// `map_c = w_c · S + b_c` on live pairs; masked pairs stay zero.
pub fn expand_channels(s: &Tensor, mask: &[bool], weight: &[f64], bias: &[f64]) -> Result<SimTensor> {
    let n = s.rows();
    if weight.is_empty() || weight.len() != bias.len() {
        return Err(Error::Shape(format!(
            "channel expansion needs C >= 1 weights and biases, got {} and {}",
            weight.len(),
            bias.len()
        )));
    }
    let c = weight.len();
    let mut maps = vec![0.0; c * n * n];
    for ch in 0..c {
        let out = &mut maps[ch * n * n..(ch + 1) * n * n];
        for i in (0..n).filter(|&i| mask[i]) {
            for j in (0..n).filter(|&j| mask[j]) {
                out[i * n + j] = weight[ch] * s.data()[i * n + j] + bias[ch];
            }
        }
    }
    Ok(SimTensor { channels: c, n, maps })
}

pub struct ExpandGrads {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub d_s: Vec<f64>,
}

pub fn expand_channels_backward(s: &Tensor, mask: &[bool], weight: &[f64], d_maps: &[f64]) -> ExpandGrads {
    let n = s.rows();
    let c = weight.len();
    let mut d_weight = vec![0.0; c];
    let mut d_bias = vec![0.0; c];
    let mut d_s = vec![0.0; n * n];
    for ch in 0..c {
        let g = &d_maps[ch * n * n..(ch + 1) * n * n];
        for i in (0..n).filter(|&i| mask[i]) {
            for j in (0..n).filter(|&j| mask[j]) {
                let k = i * n + j;
                d_weight[ch] += g[k] * s.data()[k];
                d_bias[ch] += g[k];
                d_s[k] += g[k] * weight[ch];
            }
        }
    }
    ExpandGrads { d_weight, d_bias, d_s }
}

/// How a face's rows of the correlation maps are laid out before projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenLayout {
    /// Each channel row sorted in descending order over live slots, padding
    /// zeros last. The token depends only on the multiset of similarities.
    #[default]
    Sorted,
    /// Rows in slot order.
    Slot,
}

impl std::str::FromStr for TokenLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sorted" => Ok(TokenLayout::Sorted),
            "slot" => Ok(TokenLayout::Slot),
            other => Err(Error::Config(format!("unknown token layout {other:?}"))),
        }
    }
}

impl std::fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenLayout::Sorted => "sorted",
            TokenLayout::Slot => "slot",
        })
    }
}

/// Forward state of [`face_tokens`] kept for the backward pass.
pub struct TokenCache {
    /// `n × (C·n)` projection inputs.
    pub rows: Vec<f64>,
    /// For every entry of `rows`, the flat index into the maps it came from
    /// (`usize::MAX` for padding zeros).
    pub source: Vec<usize>,
}

/// `token_i = r_i · proj`, where `r_i` concatenates row `i` of every map.
pub fn face_tokens(t: &SimTensor, mask: &[bool], proj: &Tensor, layout: TokenLayout) -> Result<(Tensor, TokenCache)> {
    let (n, c) = (t.n, t.channels);
    let width = c * n;
    if proj.rows() != width || proj.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "token projection is {:?}, expected [{width}, d_model]",
            proj.shape()
        )));
    }
    let d_model = proj.cols();
    let mut rows = vec![0.0; n * width];
    let mut source = vec![usize::MAX; n * width];
    let live: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
    for i in live.iter().copied() {
        for ch in 0..c {
            let base = ch * n * n + i * n;
            let dst = i * width + ch * n;
            match layout {
                TokenLayout::Slot => {
                    for &j in &live {
                        rows[dst + j] = t.maps[base + j];
                        source[dst + j] = base + j;
                    }
                }
                TokenLayout::Sorted => {
                    let mut order = live.clone();
                    order.sort_by(|&a, &b| t.maps[base + b].total_cmp(&t.maps[base + a]));
                    for (k, j) in order.into_iter().enumerate() {
                        rows[dst + k] = t.maps[base + j];
                        source[dst + k] = base + j;
                    }
                }
            }
        }
    }
    let mut tokens = matmul(&rows, proj.data(), n, width, d_model);
    for i in (0..n).filter(|&i| !mask[i]) {
        tokens[i * d_model..(i + 1) * d_model].fill(0.0);
    }
    Ok((Tensor::from_vec(&[n, d_model], tokens)?, TokenCache { rows, source }))
}

/// Returns `(d_proj, d_maps)`.
pub fn face_tokens_backward(
    cache: &TokenCache,
    mask: &[bool],
    proj: &Tensor,
    d_tokens: &[f64],
    maps_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = mask.len();
    let width = proj.rows();
    let d_model = proj.cols();
    let mut d_tok = d_tokens.to_vec();
    for i in (0..n).filter(|&i| !mask[i]) {
        d_tok[i * d_model..(i + 1) * d_model].fill(0.0);
    }
    let d_proj = matmul_tn(&cache.rows, &d_tok, n, width, d_model);
    let d_rows = matmul_nt(&d_tok, proj.data(), n, d_model, width);
    let mut d_maps = vec![0.0; maps_len];
    for (g, &src) in d_rows.iter().zip(&cache.source) {
        if src != usize::MAX {
            d_maps[src] += g;
        }
    }
    (d_proj, d_maps)
}

/// Writes `matrix` as an ASCII graymap (`[-1, 1] → [0, 255]`) and a CSV
/// with the raw values. Returns the two paths.
pub fn write_heatmap(matrix: &Tensor, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref();
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let mut pgm = format!("P2\n{cols} {rows}\n255\n");
    let mut csv = String::new();
    for r in 0..rows {
        let row = matrix.row(r);
        let gray: Vec<String> = row
            .iter()
            .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8).to_string())
            .collect();
        pgm.push_str(&gray.join(" "));
        pgm.push('\n');
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                csv.push(',');
            }
            write!(csv, "{v}").expect("writing to a String");
        }
        csv.push('\n');
    }
    let pgm_path = with_suffix(prefix, "pgm");
    let csv_path = with_suffix(prefix, "csv");
    fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok((pgm_path, csv_path))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        for cell in line.split(',') {
            data.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: ln + 1,
                msg: format!("{cell:?}: {e}"),
            })?);
        }
        rows += 1;
    }
    let cols = data.len().checked_div(rows).unwrap_or(0);
    Tensor::from_vec(&[rows, cols], data)
}
