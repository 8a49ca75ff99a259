//! Seeded synthetic corpora for end-to-end runs without real encoders.
//!
//! Every concept gets an orthonormal text direction, an orthonormal visual
//! direction and a colour. Images are grids of concept regions; features,
//! value vectors, embeddings and RGB pixels are noisy copies of the region's
//! concept attributes. The generated directory is a complete pipeline input:
//! index manifest, feature/value tensors, projection, RGB images, ground
//! truth masks and a `config.json`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SegmentationMask;
use crate::pipeline::{PipelineConfig, PipelinePaths, Toggles, DEFAULT_BACKGROUNDS};
use crate::retrieval::ConceptSpec;
use crate::tensor_io::{write_json, write_tensor, IndexManifest};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub targets: Vec<String>,
    pub images_per_concept: usize,
    pub eval_images: usize,
    pub grid: usize,
    pub pixels_per_cell: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub feature_noise: f64,
    pub k: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            targets: vec!["cat".into(), "dog".into(), "sky".into()],
            images_per_concept: 6,
            eval_images: 4,
            grid: 8,
            pixels_per_cell: 4,
            feature_dim: 16,
            embed_dim: 12,
            feature_noise: 0.25,
            k: 5,
        }
    }
}

struct Concept {
    name: String,
    text: Vec<f64>,
    visual: Vec<f64>,
    color: [f64; 3],
}

fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Config(format!("{count} concepts need at least {count} dimensions, got {dim}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis)
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    base.iter().map(|&x| (x + normal.sample(rng)) as f32).collect()
}

/// Region layout: a rectangle of `main` on a field of `context`, plus an
/// optional second rectangle of `second`.
fn layout(rng: &mut ChaCha8Rng, grid: usize, main: usize, context: usize, second: Option<usize>) -> Vec<usize> {
    let mut cells = vec![context; grid * grid];
    let mut paint = |rng: &mut ChaCha8Rng, label: usize, y_range: (usize, usize)| {
        let size_h = rng.random_range(grid / 4..=grid / 2).max(1);
        let size_w = rng.random_range(grid / 4..=grid / 2).max(1);
        let y0 = rng.random_range(y_range.0..=y_range.1.saturating_sub(size_h).max(y_range.0));
        let x0 = rng.random_range(0..=grid - size_w);
        for y in y0..(y0 + size_h).min(grid) {
            for x in x0..x0 + size_w {
                cells[y * grid + x] = label;
            }
        }
    };
    match second {
        None => paint(rng, main, (0, grid)),
        Some(s) => {
            paint(rng, main, (0, grid / 2));
            paint(rng, s, (grid / 2, grid));
        }
    }
    cells
}

struct Writer<'a> {
    spec: &'a SyntheticSpec,
    concepts: &'a [Concept],
}

impl Writer<'_> {
    fn features(&self, rng: &mut ChaCha8Rng, cells: &[usize], path: &Path) -> Result<()> {
        let (g, d) = (self.spec.grid, self.spec.feature_dim);
        let mut data = vec![0f32; d * g * g];
        for (p, &c) in cells.iter().enumerate() {
            let v = noisy(rng, &self.concepts[c].visual, self.spec.feature_noise / (d as f64).sqrt());
            for (ch, x) in v.into_iter().enumerate() {
                data[ch * g * g + p] = x;
            }
        }
        write_tensor(&[d, g, g], &data, path)
    }

    fn values(&self, rng: &mut ChaCha8Rng, cells: &[usize], path: &Path) -> Result<()> {
        let (g, e) = (self.spec.grid, self.spec.embed_dim);
        let mut data = vec![0f32; e * g * g];
        for (p, &c) in cells.iter().enumerate() {
            let v = noisy(rng, &self.concepts[c].text, 0.3 / (e as f64).sqrt());
            for (ch, x) in v.into_iter().enumerate() {
                data[ch * g * g + p] = x;
            }
        }
        write_tensor(&[e, g, g], &data, path)
    }

    fn rgb(&self, rng: &mut ChaCha8Rng, cells: &[usize], path: &Path) -> Result<()> {
        let (g, s) = (self.spec.grid, self.spec.pixels_per_cell);
        let side = g * s;
        let normal = Normal::new(0.0, 6.0).expect("valid sigma");
        let mut img = image::RgbImage::new(side as u32, side as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let c = cells[(y as usize / s) * g + x as usize / s];
            let col = self.concepts[c].color;
            *px = image::Rgb(std::array::from_fn(|k| (col[k] + normal.sample(rng)).clamp(0.0, 255.0) as u8));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// Writes a synthetic fixture under `dir` and returns the path of its
/// `config.json`. Output of the generated config goes to `dir/out`.
pub fn write_fixture(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names: Vec<String> = spec.targets.clone();
    for b in DEFAULT_BACKGROUNDS {
        if !names.iter().any(|n| n == b) {
            names.push(b.to_string());
        }
    }
    let texts = orthonormal(&mut rng, names.len(), spec.embed_dim)?;
    let visuals = orthonormal(&mut rng, names.len(), spec.feature_dim)?;
    let concepts: Vec<Concept> = names
        .iter()
        .zip(texts.into_iter().zip(visuals))
        .map(|(n, (text, visual))| Concept {
            name: n.clone(),
            text,
            visual,
            color: std::array::from_fn(|_| rng.random_range(20.0..235.0)),
        })
        .collect();
    let writer = Writer { spec, concepts: &concepts };
    let bg_idx: Vec<usize> = (0..concepts.len())
        .filter(|&i| DEFAULT_BACKGROUNDS.contains(&concepts[i].name.as_str()))
        .collect();

    // corpus
    let (corpus_feat, corpus_val) = (dir.join("corpus/features"), dir.join("corpus/values"));
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut embeddings = Vec::new();
    for (ci, c) in concepts.iter().enumerate() {
        for n in 0..spec.images_per_concept {
            let id = format!("{}_{n:03}", c.name.replace(' ', "-"));
            let context = bg_idx[rng.random_range(0..bg_idx.len())];
            let context = if context == ci { bg_idx[(bg_idx.iter().position(|&b| b == ci).unwrap() + 1) % bg_idx.len()] } else { context };
            let cells = layout(&mut rng, spec.grid, ci, context, None);
            writer.features(&mut rng, &cells, &corpus_feat.join(format!("{id}.rtns")))?;
            writer.values(&mut rng, &cells, &corpus_val.join(format!("{id}.rtns")))?;
            let base: Vec<f64> = c.text.iter().zip(&concepts[context].text).map(|(a, b)| a + 0.35 * b).collect();
            embeddings.extend(noisy(&mut rng, &base, 0.1));
            ids.push(id);
            labels.push(c.name.clone());
        }
    }
    write_tensor(&[ids.len(), spec.embed_dim], &embeddings, dir.join("corpus/embeddings.rtns"))?;
    write_lines(&dir.join("corpus/ids.txt"), &ids)?;
    write_lines(&dir.join("corpus/labels.txt"), &labels)?;
    write_json(
        &IndexManifest {
            embeddings: "embeddings.rtns".into(),
            ids: "ids.txt".into(),
            labels: Some("labels.txt".into()),
        },
        dir.join("corpus/index.json"),
    )?;
    let e = spec.embed_dim;
    let proj: Vec<f32> = (0..e * e).map(|i| if i % (e + 1) == 0 { 1.0 } else { 0.0 }).collect();
    write_tensor(&[e, e], &proj, dir.join("projection.rtns"))?;

    // evaluation images: two targets on a field of the last target
    let n_t = spec.targets.len();
    if n_t == 0 {
        return Err(Error::Config("synthetic fixture needs at least one target".into()));
    }
    let mut eval_ids = Vec::new();
    for n in 0..spec.eval_images {
        let id = format!("eval_{n:03}");
        let field = n_t - 1;
        let a = n % n_t.max(1);
        let b = (n + 1) % n_t;
        let cells = layout(&mut rng, spec.grid, a, field, Some(b));
        writer.features(&mut rng, &cells, &dir.join(format!("eval/features/{id}.rtns")))?;
        writer.values(&mut rng, &cells, &dir.join(format!("eval/values/{id}.rtns")))?;
        writer.rgb(&mut rng, &cells, &dir.join(format!("eval/images/{id}.png")))?;
        let side = spec.grid * spec.pixels_per_cell;
        let gt_cells: Vec<u16> = cells.iter().map(|&c| c as u16).collect();
        let gt = SegmentationMask::new(spec.grid, spec.grid, gt_cells, spec.targets.clone())?.resized(side, side);
        gt.save_png(dir.join(format!("eval/gt/{id}.png")))?;
        eval_ids.push(id);
    }

    let specs: Vec<ConceptSpec<f32>> = concepts
        .iter()
        .map(|c| {
            ConceptSpec::new(
                c.name.clone(),
                c.text.iter().map(|&x| x as f32).collect(),
                DEFAULT_BACKGROUNDS.contains(&c.name.as_str()),
            )
        })
        .collect::<Result<_>>()?;
    let config = PipelineConfig {
        concepts: specs[..n_t].to_vec(),
        background_concepts: DEFAULT_BACKGROUNDS.iter().map(|s| s.to_string()).collect(),
        background_specs: specs[n_t..].to_vec(),
        k: spec.k,
        toggles: Toggles::default(),
        paths: PipelinePaths {
            index: "corpus/index.json".into(),
            corpus_features: "corpus/features".into(),
            corpus_values: Some("corpus/values".into()),
            projection: Some("projection.rtns".into()),
            projection_bias: None,
            eval_ids: eval_ids.clone(),
            eval_features: "eval/features".into(),
            eval_values: Some("eval/values".into()),
            eval_images: Some("eval/images".into()),
            eval_gt: Some("eval/gt".into()),
            output: "out".into(),
        },
        crf: crate::crf::CrfParams { working_max_side: Some(32), ..Default::default() },
        ..PipelineConfig::default()
    };
    let path = dir.join("config.json");
    write_json(&config, &path)?;
    Ok(path)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
