//! Attention-map export: per-(layer, head, class) decoder maps, per-head
//! means, and the visual agent's position map, each as a min-max normalized
//! PNG plus a raw CSV grid.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Scalar;
use crate::data::png_io::write_gray_png;
use crate::data::{assemble_batch, Dataset, DatasetStats};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::util::rng_for;

fn write_map(dir: &Path, stem: &str, values: &[f64], w: usize, h: usize, csv: bool) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    write_gray_png(&dir.join(format!("{stem}.png")), &pixels, w as u32, h as u32)?;
    if csv {
        let mut text = String::new();
        for row in values.chunks(w) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                let _ = write!(text, "{v}");
            }
            text.push('\n');
        }
        let path = dir.join(format!("{stem}.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Export every decoder attention map for one sample, the per-head mean maps,
/// and the position map. Returns the number of files written.
pub fn export_attention<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    sample_index: usize,
    stats: DatasetStats,
    out_dir: &Path,
) -> Result<usize> {
    if sample_index >= ds.len() {
        return Err(Error::Contract(format!(
            "export_attention: sample {sample_index} out of range ({} samples)",
            ds.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = rng_for(0, "export-noaug");
    let (x, _) = assemble_batch::<S>(ds, &[sample_index], stats, false, &mut rng)?;
    let pass = model.extract_state(&x)?;
    let diag = model.diagnose(&pass.state)?;

    let e = model.cfg.feature_extent();
    let classes = model.cfg.classes;
    let mut files = 0usize;

    for (l, attn) in diag.attention.iter().enumerate() {
        let heads = attn.shape()[1];
        let hw = attn.shape()[3];
        let vals = attn.to_f64_vec();
        for h in 0..heads {
            let mut head_sum = vec![0.0f64; hw];
            for c in 0..classes {
                let base = (h * classes + c) * hw;
                let map = &vals[base..base + hw];
                write_map(out_dir, &format!("attn_L{l}_H{h}_C{c}"), map, e, e, true)?;
                files += 2;
                for (acc, &v) in head_sum.iter_mut().zip(map) {
                    *acc += v;
                }
            }
            for v in head_sum.iter_mut() {
                *v /= classes as f64;
            }
            write_map(out_dir, &format!("attn_mean_L{l}_H{h}"), &head_sum, e, e, false)?;
            files += 1;
        }
    }

    if let Some(vis) = &pass.visual {
        let pm = vis.position_map.to_f64_vec();
        let pe = vis.position_map.shape()[2];
        write_map(out_dir, "posmap", &pm, pe, pe, true)?;
        files += 2;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_in_memory, SyntheticConfig};
    use crate::model::{ComponentToggles, Model};

    #[test]
    fn file_counts_and_row_sums_match_the_contract() {
        let mut cfg = SyntheticConfig::default_benchmark(4, 2);
        cfg.image_size = 16;
        let ds = generate_in_memory(&cfg);
        let stats = DatasetStats::compute(&ds).unwrap();
        let mut mc = ModelConfig::default_for(5, 16);
        mc.backbone.channels = vec![8, 8];
        mc.backbone.strides = vec![2, 2];
        mc.backbone.final_pool = false;
        mc.d = 16;
        mc.decoder.layers = 2;
        mc.decoder.heads = 4;
        let model: Model<f32> = Model::new(&mc, ComponentToggles::default(), 1).unwrap();
        let dir = std::env::temp_dir().join("marl_attn_export");
        let _ = std::fs::remove_dir_all(&dir);
        let files = export_attention(&model, &ds, 0, stats, &dir).unwrap();
        // 2*4*5 class maps (png+csv) + 2*4 mean maps (png) + posmap (png+csv)
        assert_eq!(files, 40 * 2 + 8 + 2);

        // every class map CSV sums to 1 (one softmax row)
        let text = std::fs::read_to_string(dir.join("attn_L0_H0_C0.csv")).unwrap();
        let total: f64 = text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|t| t.parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6);

        // PNG and CSV agree after min-max normalization within 1/255
        let (png, w, h) = crate::data::png_io::read_gray_png(&dir.join("attn_L0_H0_C0.png")).unwrap();
        let vals: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|t| t.parse::<f64>().unwrap())
            .collect();
        assert_eq!((w * h) as usize, vals.len());
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (&p, &v) in png.iter().zip(&vals) {
            let expect = (v - lo) / (hi - lo);
            assert!((p as f64 / 255.0 - expect).abs() <= 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn constant_features_give_uniform_maps() {
        let mut mc = ModelConfig::tiny_for_checks(3);
        mc.image_size = 8;
        let model: Model<f64> = Model::new(&mc, ComponentToggles::default(), 3).unwrap();
        // zero positional keys + constant state -> uniform attention
        model
            .decoder
            .as_ref()
            .unwrap()
            .embeddings
            .pos_feat
            .set_data(&vec![0.0; mc.hw() * mc.d]);
        let state = crate::autodiff::Tensor::full(&[1, mc.hw(), mc.d], 0.3);
        let diag = model.diagnose(&state).unwrap();
        for attn in &diag.attention {
            for &v in attn.data().iter() {
                assert!((v - 1.0 / mc.hw() as f64).abs() < 1e-9);
            }
        }
    }
}
