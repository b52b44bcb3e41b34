//! Image encoder: four strided 3x3 conv stages, each stage output
//! upsampled back to input resolution (nearest neighbor) and fused by a
//! 1x1 projection into the per-pixel feature map.
//!
//! Convolutions run as gather (im2col) + matmul so the whole encoder lives
//! on the tape and trains like everything else.

use super::{CameraObservation, ModelParams, ENCODER_STAGES};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Row indices for a 3x3 stride-2 pad-1 im2col over an `h x w` map.
/// -1 marks zero padding. Output is `(out_h, out_w, indices)` where
/// `indices.len() == out_h * out_w * 9` and each group of 9 is in
/// (ky, kx) order, matching the stage weight layout `[9 * c_in, c_out]`.
fn im2col_indices(h: usize, w: usize) -> (usize, usize, Vec<i64>) {
    let out_h = (h - 1) / 2 + 1;
    let out_w = (w - 1) / 2 + 1;
    let mut idx = Vec::with_capacity(out_h * out_w * 9);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let iy = (oy * 2 + ky) as i64 - 1;
                    let ix = (ox * 2 + kx) as i64 - 1;
                    if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                        idx.push(-1);
                    } else {
                        idx.push(iy * w as i64 + ix);
                    }
                }
            }
        }
    }
    (out_h, out_w, idx)
}

/// Nearest-neighbor upsample row map from `sh x sw` to `h x w`.
fn upsample_indices(sh: usize, sw: usize, h: usize, w: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = y * sh / h;
        for x in 0..w {
            let sx = x * sw / w;
            idx.push((sy * sw + sx) as i64);
        }
    }
    idx
}

/// Builds the encoder graph. `image` is an `[h*w, 3]` node; the result is
/// the `[h*w, feature_channels]` feature map node.
pub(crate) fn encoder_graph(
    tape: &mut Tape,
    params: &[NodeId],
    image: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    if tape.value(image).rows() != h * w || tape.value(image).cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "encoder",
            detail: format!("image {:?} vs {}x{}x3", tape.value(image).shape(), h, w),
        });
    }
    let mut cursor = params.iter().copied();
    let mut next = || cursor.next().expect("encoder param count");

    let mut cur = image;
    let (mut ch, mut cw) = (h, w);
    let mut stage_maps = Vec::with_capacity(ENCODER_STAGES.len());
    let mut stage_dims = Vec::with_capacity(ENCODER_STAGES.len());
    for &(cin, _cout) in ENCODER_STAGES.iter() {
        let (oh, ow, idx) = im2col_indices(ch, cw);
        let gathered = tape.gather_rows(cur, &idx)?;
        let cols = tape.reshape(gathered, vec![oh * ow, 9 * cin])?;
        let weight = next();
        let bias = next();
        cur = tape.affine(cols, weight, bias, true)?;
        stage_maps.push(cur);
        stage_dims.push((oh, ow));
        ch = oh;
        cw = ow;
    }

    let mut upsampled = Vec::with_capacity(stage_maps.len());
    for (&map, &(sh, sw)) in stage_maps.iter().zip(stage_dims.iter()) {
        let idx = upsample_indices(sh, sw, h, w);
        upsampled.push(tape.gather_rows(map, &idx)?);
    }
    let cat = tape.concat_cols(&upsampled)?;
    let weight = next();
    let bias = next();
    tape.affine(cat, weight, bias, false)
}

/// Feature map of one observation, `[h*w, feature_channels]`, no gradient
/// tracking. Cacheable per (image, encoder weights).
pub fn compute_feature_map(params: &ModelParams, image: &crate::scene::Image) -> Result<Tensor> {
    if image.width != params.config.image_width || image.height != params.config.image_height {
        return Err(Error::ShapeMismatch {
            op: "encoder",
            detail: format!(
                "image {}x{} vs configured {}x{}",
                image.width, image.height, params.config.image_width, params.config.image_height
            ),
        });
    }
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = params
        .encoder
        .iter()
        .map(|pt| {
            let t = Tensor::new(pt.shape.clone(), pt.data.clone()).expect("param tensor");
            tape.constant(t)
        })
        .collect();
    let img = tape.constant(image.to_tensor());
    let map = encoder_graph(&mut tape, &nodes, img, image.height, image.width)?;
    Ok(tape.value(map).clone())
}

/// Deterministic per-pixel features for an observation.
pub fn encode_image(obs: &CameraObservation, params: &ModelParams) -> Result<Tensor> {
    obs.validate()?;
    compute_feature_map(params, &obs.image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModelConfig;
    use crate::scene::Image;

    fn tiny_params() -> ModelParams {
        let config = ModelConfig { image_width: 16, image_height: 16, ..ModelConfig::default() };
        ModelParams::init(config, 4).unwrap()
    }

    #[test]
    fn im2col_covers_every_output_pixel() {
        let (oh, ow, idx) = im2col_indices(16, 16);
        assert_eq!((oh, ow), (8, 8));
        assert_eq!(idx.len(), 8 * 8 * 9);
        assert!(idx.iter().all(|&i| i >= -1 && i < 256));
        // the first window is the top-left corner with padding
        assert_eq!(&idx[..9], &[-1, -1, -1, -1, 0, 1, -1, 16, 17]);
    }

    #[test]
    fn upsample_map_is_blockwise_constant() {
        let idx = upsample_indices(2, 2, 4, 4);
        assert_eq!(idx, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    }

    #[test]
    fn output_spatial_dims_match_input_dims() {
        let params = tiny_params();
        let img = Image::new(16, 16);
        let map = compute_feature_map(&params, &img).unwrap();
        assert_eq!(map.shape(), &[16 * 16, params.config.feature_channels]);
    }

    #[test]
    fn zero_image_encodes_deterministically() {
        let params = tiny_params();
        let img = Image::new(16, 16);
        let a = compute_feature_map(&params, &img).unwrap();
        let b = compute_feature_map(&params, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_at_projection_equals_bilinear_of_the_map() {
        // contract between encode_image and the shared bilinear sampler
        let params = tiny_params();
        let mut img = Image::new(16, 16);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = ((i % 101) as f32) / 101.0;
        }
        let map = compute_feature_map(&params, &img).unwrap();
        let direct = crate::camera::bilinear_sample(&map, 16, 16, 5.3, 9.8).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(map.clone());
        let uv = tape.constant(Tensor::new(vec![1, 2], vec![5.3, 9.8]).unwrap());
        let node = tape.bilinear(m, uv, 16, 16).unwrap();
        for (a, b) in tape.value(node).data().iter().zip(direct.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn far_away_pixels_do_not_change_local_features() {
        // the receptive field of four stride-2 convs is well under 40 px
        let config = ModelConfig { image_width: 96, image_height: 96, ..ModelConfig::default() };
        let params = ModelParams::init(config, 8).unwrap();
        let mut img = Image::new(96, 96);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = ((i * 31 % 97) as f32) / 97.0;
        }
        let before = compute_feature_map(&params, &img).unwrap();
        // corrupt a 5x5 corner patch
        for y in 0..5 {
            for x in 0..5 {
                let i = (y * 96 + x) * 3;
                img.pixels[i] = 1.0 - img.pixels[i];
            }
        }
        let after = compute_feature_map(&params, &img).unwrap();
        let c = params.config.feature_channels;
        let center = (48 * 96 + 48) * c;
        assert_eq!(&before.data()[center..center + c], &after.data()[center..center + c]);
        // but the corner itself did change
        assert_ne!(&before.data()[..c], &after.data()[..c]);
    }
}
