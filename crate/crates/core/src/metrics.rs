//! Text alignment, image alignment and temporal consistency over a joint
//! image/text embedder, plus CSV and table reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{Frame, FrameVideo};
use crate::error::invalid;
use crate::text::tokenize;
use crate::{rng, Result};

/// Maps frames and prompts into a shared space. Implementations should
/// return unit vectors; the metrics normalise anyway.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed_image(&self, frame: Frame<'_>) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

/// Frozen random projection of an 8x8 area-downsampled frame; text is a bag
/// of hashed token vectors in the same space.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    dim: usize,
    grid: usize,
    proj: Vec<f64>,
    bias: Vec<f64>,
    seed: u64,
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let grid = 8;
        let fan = grid * grid * 3;
        let mut r = rng::stream(seed, "embedder.proj");
        let proj = rng::gaussian_vec(&mut r, dim * fan, 1.0 / (fan as f64).sqrt());
        let mut r = rng::stream(seed, "embedder.bias");
        let bias = rng::gaussian_vec(&mut r, dim, 0.5);
        Self {
            dim,
            grid,
            proj,
            bias,
            seed,
        }
    }

    fn pooled(&self, frame: Frame<'_>) -> Vec<f64> {
        let g = self.grid;
        let mut acc = vec![0.0; g * g * 3];
        let mut count = vec![0usize; g * g];
        for y in 0..frame.height {
            let gy = y * g / frame.height;
            for x in 0..frame.width {
                let gx = x * g / frame.width;
                let cell = gy * g + gx;
                count[cell] += 1;
                for c in 0..3 {
                    acc[cell * 3 + c] += f64::from(frame.data[(y * frame.width + x) * 3 + c]);
                }
            }
        }
        for (i, v) in acc.iter_mut().enumerate() {
            *v /= count[i / 3].max(1) as f64;
        }
        acc
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, frame: Frame<'_>) -> Vec<f64> {
        let x = self.pooled(frame);
        let fan = x.len();
        let v = (0..self.dim)
            .map(|o| self.bias[o] + self.proj[o * fan..(o + 1) * fan].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        normalized(v)
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = self.bias.clone();
        for token in tokenize(text) {
            let digest = Sha256::digest(token.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
            let mut r = rng::stream(self.seed ^ h, "embedder.token");
            for (a, b) in v.iter_mut().zip(rng::gaussian_vec(&mut r, self.dim, 1.0)) {
                *a += b;
            }
        }
        normalized(v)
    }
}

/// Cosine similarity; a zero vector has similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn image_embeddings(v: &FrameVideo, emb: &dyn Embedder) -> Vec<Vec<f64>> {
    (0..v.frame_count()).map(|i| emb.embed_image(v.frame(i))).collect()
}

/// Mean over frames of `100 * cos(image, prompt)`.
pub fn text_alignment(frames: &FrameVideo, prompt: &str, emb: &dyn Embedder) -> f64 {
    let t = emb.embed_text(prompt);
    mean(image_embeddings(frames, emb).iter().map(|e| 100.0 * cosine(e, &t)))
}

/// Mean over all (frame, reference) pairs of `100 * cos`.
pub fn image_alignment(frames: &FrameVideo, refs: &FrameVideo, emb: &dyn Embedder) -> f64 {
    let r = image_embeddings(refs, emb);
    let f = image_embeddings(frames, emb);
    mean(f.iter().flat_map(|a| r.iter().map(move |b| 100.0 * cosine(a, b))))
}

/// Mean over consecutive frame pairs of `100 * cos`.
pub fn temporal_consistency(frames: &FrameVideo, emb: &dyn Embedder) -> Result<f64> {
    if frames.frame_count() < 2 {
        return Err(invalid("temporal consistency needs at least two frames"));
    }
    let e = image_embeddings(frames, emb);
    Ok(mean(e.windows(2).map(|w| 100.0 * cosine(&w[0], &w[1]))))
}

/// Which report group a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    ReferenceGuided,
    TextGuided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub text_alignment: Option<f64>,
    pub image_alignment: Option<f64>,
    pub temporal_consistency: Option<f64>,
}

impl MetricRow {
    pub fn mode(&self) -> EditMode {
        if self.image_alignment.is_some() {
            EditMode::ReferenceGuided
        } else {
            EditMode::TextGuided
        }
    }
}

/// Column order of the CSV report.
pub const CSV_HEADER: [&str; 4] = ["method", "text_alignment", "image_alignment", "temporal_consistency"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(invalid("report needs at least one row"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            cell(r.text_alignment),
            cell(r.image_alignment),
            cell(r.temporal_consistency),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(format!("csv flush failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(invalid(format!("unexpected report header {header:?}")));
    }
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| invalid(format!("bad metric value `{s}`")))
        }
    };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricRow {
                method: rec[0].to_string(),
                text_alignment: parse(&rec[1])?,
                image_alignment: parse(&rec[2])?,
                temporal_consistency: parse(&rec[3])?,
            })
        })
        .collect()
}

/// Plain-text table grouped like the usual comparison table, with `\` for
/// inapplicable cells.
pub fn render_table(rows: &[MetricRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(invalid("report needs at least one row"));
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "\\".to_string(), |x| format!("{x:.2}"));
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let header = format!(
        "{:<width$} | {:>14} | {:>15} | {:>20}",
        "Method", "Text Alignment", "Image Alignment", "Temporal Consistency"
    );
    for (mode, title) in [
        (EditMode::ReferenceGuided, "Reference Image Guided Subject Editing"),
        (EditMode::TextGuided, "Text Guided Subject Editing"),
    ] {
        let group: Vec<&MetricRow> = rows.iter().filter(|r| r.mode() == mode).collect();
        if group.is_empty() {
            continue;
        }
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        for r in group {
            let _ = writeln!(
                out,
                "{:<width$} | {:>14} | {:>15} | {:>20}",
                r.method,
                fmt(r.text_alignment),
                fmt(r.image_alignment),
                fmt(r.temporal_consistency)
            );
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.txt` next to each other.
pub fn evaluation_report(rows: &[MetricRow], dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), rows_to_csv(rows)?)?;
    std::fs::write(dir.join(format!("{stem}.txt")), render_table(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a fixed vector per frame index, read from the red channel of
    /// the first pixel.
    struct Table(Vec<Vec<f64>>, Vec<f64>);

    impl Embedder for Table {
        fn dim(&self) -> usize {
            self.1.len()
        }
        fn embed_image(&self, frame: Frame<'_>) -> Vec<f64> {
            self.0[(frame.data[0] * 10.0).round() as usize].clone()
        }
        fn embed_text(&self, _: &str) -> Vec<f64> {
            self.1.clone()
        }
    }

    fn indexed_video(ids: &[usize]) -> FrameVideo {
        let data = ids.iter().flat_map(|&i| vec![i as f32 / 10.0; 3]).collect();
        FrameVideo::new(ids.len(), 1, 1, data).unwrap()
    }

    fn unit_at(angle_deg: f64) -> Vec<f64> {
        let a = angle_deg.to_radians();
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn text_alignment_examples() {
        let same = Table(vec![vec![1.0, 0.0]], vec![1.0, 0.0]);
        assert!((text_alignment(&indexed_video(&[0, 0]), "x", &same) - 100.0).abs() < 1e-12);
        let orth = Table(vec![vec![1.0, 0.0]], vec![0.0, 1.0]);
        assert_eq!(text_alignment(&indexed_video(&[0]), "x", &orth), 0.0);
        let two = Table(vec![unit_at(0.8f64.acos().to_degrees()), unit_at(0.9f64.acos().to_degrees())], vec![1.0, 0.0]);
        assert!((text_alignment(&indexed_video(&[0, 1]), "x", &two) - 85.0).abs() < 1e-9);
    }

    #[test]
    fn image_alignment_examples() {
        let e = Table(vec![vec![1.0, 0.0], unit_at(0.6f64.acos().to_degrees()), unit_at(-(0.8f64.acos().to_degrees()))], vec![1.0, 0.0]);
        assert!((image_alignment(&indexed_video(&[0]), &indexed_video(&[1, 2]), &e) - 70.0).abs() < 1e-9);
        assert!((image_alignment(&indexed_video(&[1]), &indexed_video(&[1]), &e) - 100.0).abs() < 1e-9);
        let orth = Table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 0.0]);
        assert_eq!(image_alignment(&indexed_video(&[0]), &indexed_video(&[1]), &orth), 0.0);
        let f = indexed_video(&[0, 1]);
        let r = indexed_video(&[2, 1]);
        assert!((image_alignment(&f, &r, &e) - image_alignment(&r, &f, &e)).abs() < 1e-12);
    }

    #[test]
    fn temporal_examples() {
        let e = Table(vec![vec![1.0, 0.0], vec![0.0, 1.0], unit_at(0.9f64.acos().to_degrees())], vec![1.0, 0.0]);
        assert_eq!(temporal_consistency(&indexed_video(&[0, 0, 0]), &e).unwrap(), 100.0);
        assert_eq!(temporal_consistency(&indexed_video(&[0, 1, 0, 1]), &e).unwrap(), 0.0);
        assert!(temporal_consistency(&indexed_video(&[0]), &e).is_err());
        // pair scores 90 and 94
        let g = Table(vec![unit_at(0.0), unit_at(0.9f64.acos().to_degrees()), unit_at(0.9f64.acos().to_degrees() + 0.94f64.acos().to_degrees())], vec![1.0, 0.0]);
        assert!((temporal_consistency(&indexed_video(&[0, 1, 2]), &g).unwrap() - 92.0).abs() < 1e-9);
    }

    #[test]
    fn toy_embedder_is_unit_norm_and_deterministic() {
        let e = ToyEmbedder::new(64, 3);
        let v = FrameVideo::new(1, 16, 16, (0..768).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let a = e.embed_image(v.frame(0));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(a, e.embed_image(v.frame(0)));
        let t = e.embed_text("a dog");
        assert!((t.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_ne!(t, e.embed_text("a cat"));
    }

    #[test]
    fn csv_round_trip_and_rendering() {
        let rows = vec![
            MetricRow {
                method: "ours".into(),
                text_alignment: Some(31.25),
                image_alignment: Some(84.27),
                temporal_consistency: Some(92.33),
            },
            MetricRow {
                method: "text only".into(),
                text_alignment: Some(30.0),
                image_alignment: None,
                temporal_consistency: Some(91.5),
            },
        ];
        let csv = rows_to_csv(&rows).unwrap();
        assert!(csv.starts_with("method,text_alignment,image_alignment,temporal_consistency\n"));
        assert!(csv.contains("text only,30,,91.5"));
        assert_eq!(rows_from_csv(&csv).unwrap(), rows);
        let table = render_table(&rows).unwrap();
        let text_section = table.split("Text Guided Subject Editing").nth(1).unwrap();
        assert!(text_section.lines().any(|l| l.starts_with("text only") && l.contains(" \\ ")));
        assert!(table.starts_with("Reference Image Guided Subject Editing"));
        assert!(rows_to_csv(&[]).is_err());
    }
}
