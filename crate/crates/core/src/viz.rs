//! Attention-map export: JSON weights and nearest-neighbor heat-map overlays.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ImageTensor, PairBatch, TextBlock, Vocab};
use crate::error::{Error, Result};
use crate::model::Mcen;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub id: String,
    /// `[rows, cols]` of the region grid.
    pub grid: [usize; 2],
    /// Row-major region weights.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngredientMap {
    pub id: String,
    /// Ingredient text as seen by the encoder, in list order.
    pub ingredients: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub images: Vec<RegionMap>,
    pub recipes: Vec<IngredientMap>,
}

fn square_side(cells: usize) -> Result<usize> {
    let s = (cells as f64).sqrt().round() as usize;
    if s * s != cells {
        return Err(Error::InvalidArgument(format!(
            "{cells} regions do not form a square grid"
        )));
    }
    Ok(s)
}

/// Region and ingredient attention of the first image of every pair.
pub fn attention_maps<T: Scalar>(
    model: &Mcen,
    store: &ParamStore<T>,
    data: &Dataset,
    vocab: Option<&Vocab>,
    batch_size: usize,
) -> Result<AttentionExport> {
    let (cells, _) = model.image.backbone.grid();
    let side = square_side(cells)?;
    let mut images = Vec::with_capacity(data.len());
    let mut recipes = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = PairBatch::<T>::build(data, chunk, &vec![0; chunk.len()])?;
        let w = model.image_attention(store, &batch.images)?;
        for (r, &i) in chunk.iter().enumerate() {
            images.push(RegionMap {
                id: data.docs[i].id.clone(),
                grid: [side, side],
                weights: w.row(r).iter().map(|v| v.f64()).collect(),
            });
        }
        let ing: Vec<&[Vec<u32>]> = chunk
            .iter()
            .map(|i| data.docs[*i].ingredients.as_slice())
            .collect();
        let ins: Vec<&[Vec<u32>]> = chunk
            .iter()
            .map(|i| data.docs[*i].instructions.as_slice())
            .collect();
        let weights = model.ingredient_attention(
            store,
            &TextBlock::from_docs(&ing),
            &TextBlock::from_docs(&ins),
        )?;
        for (&i, w) in chunk.iter().zip(weights) {
            let doc = &data.docs[i];
            recipes.push(IngredientMap {
                id: doc.id.clone(),
                ingredients: doc
                    .ingredients
                    .iter()
                    .map(|s| match vocab {
                        Some(v) => v.decode(s).join(" "),
                        None => s.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
                    })
                    .collect(),
                weights: w.iter().map(|v| v.f64()).collect(),
            });
        }
    }
    Ok(AttentionExport { images, recipes })
}

/// Overlay region weights on `img`: every pixel takes the weight of the grid
/// cell containing it, scaled by the map maximum and blended in red.
pub fn render_heatmap(img: &ImageTensor, map: &RegionMap) -> RgbImage {
    let [gh, gw] = map.grid;
    let max = map.weights.iter().copied().fold(0.0, f64::max);
    let base = img.to_rgb8();
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let cy = y as usize * gh / img.height;
        let cx = x as usize * gw / img.width;
        let heat = if max > 0.0 {
            map.weights[cy * gw + cx] / max
        } else {
            0.0
        };
        let p = base.get_pixel(x, y).0;
        let mix = |c: u8, target: f64| (0.5 * c as f64 + 0.5 * 255.0 * target).round() as u8;
        Rgb([mix(p[0], heat), mix(p[1], 0.0), mix(p[2], 1.0 - heat)])
    })
}

/// Write `attention.json` and one `heatmaps/<id>.png` per image under `dir`.
pub fn write_attention(dir: &Path, export: &AttentionExport, data: &Dataset) -> Result<()> {
    let maps = dir.join("heatmaps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let json = dir.join("attention.json");
    fs::write(&json, serde_json::to_vec_pretty(export)?).map_err(|e| Error::io(&json, e))?;
    for (map, imgs) in export.images.iter().zip(&data.images) {
        let name: String = map
            .id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        render_heatmap(&imgs[0], map)
            .save_with_format(maps.join(format!("{name}.png")), image::ImageFormat::Png)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthOptions};
    use crate::image_encoder::BackboneConfig;
    use crate::model::ModelConfig;

    fn setup() -> (Mcen, ParamStore<f32>, crate::corpus::SyntheticCorpus) {
        let mut opts = SynthOptions::new(3, 5, 2);
        opts.image_size = 32;
        let s = generate_synthetic(&opts).unwrap();
        let config = ModelConfig {
            backbone: BackboneConfig {
                input_size: 32,
                tiny_channels: vec![4, 8, 8],
                ..BackboneConfig::tiny()
            },
            ..ModelConfig::desk()
        };
        let (m, store) = Mcen::new::<f32>(&config, s.vocab.len(), 1).unwrap();
        (m, store, s)
    }

    #[test]
    fn maps_are_distributions_aligned_with_inputs() {
        let (m, store, s) = setup();
        let d = s.dataset();
        let ex = attention_maps(&m, &store, &d, Some(&s.vocab), 2).unwrap();
        assert_eq!(ex.images.len(), 5);
        for map in &ex.images {
            assert_eq!(map.grid, [4, 4]);
            assert_eq!(map.weights.len(), 16);
            assert!((map.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        for (map, doc) in ex.recipes.iter().zip(&d.docs) {
            assert_eq!(map.weights.len(), doc.ingredients.len());
            assert_eq!(map.ingredients.len(), doc.ingredients.len());
            assert_eq!(
                map.ingredients[0],
                s.vocab.decode(&doc.ingredients[0]).join(" ")
            );
            assert!((map.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn heatmap_is_piecewise_constant_per_cell() {
        let img = ImageTensor {
            height: 8,
            width: 8,
            data: vec![0.0; 8 * 8 * 3],
        };
        let map = RegionMap {
            id: "x".into(),
            grid: [2, 2],
            weights: vec![0.0, 0.0, 0.0, 1.0],
        };
        let out = render_heatmap(&img, &map);
        assert_eq!(out.get_pixel(0, 0), out.get_pixel(3, 3));
        assert_eq!(out.get_pixel(4, 4), out.get_pixel(7, 7));
        assert_eq!(out.get_pixel(7, 7).0, [128, 0, 0]);
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 128]);
    }

    #[test]
    fn files_are_written() {
        let (m, store, s) = setup();
        let d = s.dataset();
        let ex = attention_maps(&m, &store, &d, None, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_attention(dir.path(), &ex, &d).unwrap();
        let back: AttentionExport =
            serde_json::from_slice(&fs::read(dir.path().join("attention.json")).unwrap()).unwrap();
        assert_eq!(back, ex);
        assert_eq!(
            fs::read_dir(dir.path().join("heatmaps")).unwrap().count(),
            5
        );
    }
}
