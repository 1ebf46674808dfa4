use std::time::Instant;

use blurfield::raster::Raster;
use blurfield::sharpness::{
    depth_segmented_quantize, load_external_map, quantize, save_map_u16, skip_mask, sml_map, tenengrad_map,
    ExternalKind, LevelMap, PriorSource, SharpnessMap,
};
use image::{ImageBuffer, Luma};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gray(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster<f64> {
    Raster::from_vec(h, w, 1, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
}

/// One-pixel border with point reflection `I(-1) = 2 I(0) - I(1)`.
fn pad_odd(img: &Raster<f64>) -> Vec<Vec<f64>> {
    let (h, w) = (img.height, img.width);
    let mut p = vec![vec![0.0; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            p[y + 1][x + 1] = img.get(y, x, 0);
        }
        p[y + 1][0] = 2.0 * p[y + 1][1] - p[y + 1][2];
        p[y + 1][w + 1] = 2.0 * p[y + 1][w] - p[y + 1][w - 1];
    }
    for x in 0..w + 2 {
        p[0][x] = 2.0 * p[1][x] - p[2][x];
        p[h + 1][x] = 2.0 * p[h][x] - p[h - 1][x];
    }
    p
}

/// 3x3 box sum with mirrored borders that skip the edge sample.
fn window3(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (m.len(), m[0].len());
    let refl = |i: isize, n: usize| -> usize {
        if i < 0 {
            1
        } else if i as usize >= n {
            n - 2
        } else {
            i as usize
        }
    };
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    out[y][x] += m[refl(y as isize + dy, h)][refl(x as isize + dx, w)];
                }
            }
        }
    }
    out
}

#[test]
fn sml_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_gray(&mut rng, 7, 7);
    let p = pad_odd(&img);
    let mut ml = vec![vec![0.0; 7]; 7];
    for y in 0..7 {
        for x in 0..7 {
            let (py, px) = (y + 1, x + 1);
            ml[y][x] = (2.0 * p[py][px] - p[py][px - 1] - p[py][px + 1]).abs()
                + (2.0 * p[py][px] - p[py - 1][px] - p[py + 1][px]).abs();
        }
    }
    let want = window3(&ml);
    let got = sml_map(&img, 1, 3).unwrap().values;
    for y in 0..7 {
        for x in 0..7 {
            assert!((got.get(y, x, 0) - want[y][x]).abs() < 1e-12, "({y},{x})");
        }
    }
}

#[test]
fn tenengrad_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_gray(&mut rng, 7, 7);
    let p = pad_odd(&img);
    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = vec![vec![0.0; 7]; 7];
    for y in 0..7 {
        for x in 0..7 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    gx += sx[i][j] * p[y + i][x + j];
                    gy += sx[j][i] * p[y + i][x + j];
                }
            }
            mag[y][x] = gx * gx + gy * gy;
        }
    }
    let want = window3(&mag);
    let got = tenengrad_map(&img, 3).unwrap().values;
    for y in 0..7 {
        for x in 0..7 {
            assert!((got.get(y, x, 0) - want[y][x]).abs() < 1e-10, "({y},{x})");
        }
    }
}

proptest! {
    #[test]
    fn sml_vanishes_on_affine_images(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0) {
        let img = Raster::from_vec(9, 11, 1, (0..99).map(|i| a * (i / 11) as f64 + b * (i % 11) as f64 + c).collect()).unwrap();
        let m = sml_map(&img, 1, 3).unwrap();
        prop_assert!(m.values.data.iter().all(|v| v.abs() < 1e-9));
        // the Sobel response of a plane is its (constant) slope
        let t = tenengrad_map(&img, 3).unwrap();
        let first = t.values.data[0];
        prop_assert!(t.values.data.iter().all(|v| (v - first).abs() < 1e-8 * first.max(1.0)));
    }

    #[test]
    fn an_edge_gives_positive_response(col in 2usize..9) {
        let img = Raster::from_vec(8, 11, 1, (0..88).map(|i| if i % 11 >= col { 1.0 } else { 0.0 }).collect()).unwrap();
        prop_assert!(sml_map(&img, 1, 3).unwrap().values.data.iter().any(|&v| v > 0.0));
        prop_assert!(tenengrad_map(&img, 3).unwrap().values.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn quantize_ignores_positive_affine_rescale(seed in any::<u64>(), e in -4i32..5, shift in -20i32..20, nk in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..60).map(|_| rng.gen_range(0..1024) as f64 / 1024.0).collect();
        let map = SharpnessMap { values: Raster::from_vec(6, 10, 1, vals.clone()).unwrap(), source: PriorSource::Sml };
        let scaled: Vec<f64> = vals.iter().map(|v| v * 2f64.powi(e) + shift as f64).collect();
        let other = SharpnessMap { values: Raster::from_vec(6, 10, 1, scaled).unwrap(), source: PriorSource::Sml };
        prop_assert_eq!(quantize(&map, nk).unwrap(), quantize(&other, nk).unwrap());
    }

    #[test]
    fn levels_are_monotone_in_sharpness(seed in any::<u64>(), nk in 1usize..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
        let map = SharpnessMap { values: Raster::from_vec(10, 10, 1, vals.clone()).unwrap(), source: PriorSource::Tenengrad };
        let l = quantize(&map, nk).unwrap();
        for i in 0..100 {
            prop_assert!((l.levels[i] as usize) < nk);
            for j in 0..100 {
                if vals[i] > vals[j] {
                    prop_assert!(l.levels[i] >= l.levels[j]);
                }
            }
        }
    }
}

#[test]
fn four_hundred_levels_match_binning_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..64 * 64).map(|_| rng.gen::<f64>().powi(3) * 7.0).collect();
    let map = SharpnessMap {
        values: Raster::from_vec(64, 64, 1, vals.clone()).unwrap(),
        source: PriorSource::Sml,
    };
    let l = quantize(&map, 400).unwrap();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut want = vec![0usize; 400];
    let mut got = vec![0usize; 400];
    for (v, &lv) in vals.iter().zip(&l.levels) {
        let bin = (((v - lo) / (hi - lo) * 400.0).floor() as usize).min(399);
        want[bin] += 1;
        got[lv as usize] += 1;
    }
    assert_eq!(got, want);
}

#[test]
fn segmented_quantize_matches_partition_then_bin() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (12, 15);
    let vals: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
    let depth: Vec<f64> = (0..h * w).map(|_| rng.gen_range(1.0..5.0)).collect();
    let map = SharpnessMap {
        values: Raster::from_vec(h, w, 1, vals.clone()).unwrap(),
        source: PriorSource::Sml,
    };
    let d = Raster::from_vec(h, w, 1, depth.clone()).unwrap();
    let got = depth_segmented_quantize(&map, Some(&d), 3, 16).unwrap();

    let mut sorted = depth.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let cuts = [sorted[n / 3], sorted[2 * n / 3]];
    let seg: Vec<usize> = depth.iter().map(|&x| cuts.iter().filter(|&&c| x >= c).count()).collect();
    for s in 0..3 {
        let members: Vec<usize> = (0..n).filter(|&i| seg[i] == s).collect();
        assert!(!members.is_empty());
        let lo = members.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
        for &i in &members {
            let want = (((vals[i] - lo) / (hi - lo) * 16.0).floor() as u32).min(15);
            assert_eq!(got.levels[i], want, "pixel {i} in segment {s}");
        }
    }
    assert!(depth_segmented_quantize(&map, None, 3, 16).is_err());
}

#[test]
fn four_hundred_groups_skip_the_top_hundred() {
    let levels = LevelMap {
        height: 1,
        width: 400,
        n_levels: 400,
        levels: (0..400).collect(),
    };
    let m = skip_mask(&levels, 100);
    assert!(m.iter().enumerate().all(|(l, &s)| s == (l >= 300)));
    assert!(skip_mask(&levels, 0).iter().all(|&s| !s));
    assert!(skip_mask(&levels, 400).iter().all(|&s| s));
}

#[test]
fn zero_defocus_file_is_fully_sharp() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.png");
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(5, 4, vec![0; 20]).unwrap().save(&path).unwrap();
    let m: Raster<f64> = load_external_map(&path, ExternalKind::Defocus, Some((4, 5)), "v").unwrap();
    assert!(m.data.iter().all(|&v| v == 1.0));
    let err = load_external_map::<f64>(&path, ExternalKind::Defocus, Some((5, 5)), "v0012").unwrap_err();
    assert!(err.to_string().contains("v0012"));
}

#[test]
fn sixteen_bit_midpoint_reads_as_half() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.png");
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(3, 3, vec![32768; 9]).unwrap().save(&path).unwrap();
    let m: Raster<f64> = load_external_map(&path, ExternalKind::Depth, None, "v").unwrap();
    assert!(m.data.iter().all(|&v| (v - 0.5).abs() <= 1.0 / 65535.0));
}

#[test]
fn map_roundtrip_within_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = random_gray(&mut rng, 9, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    save_map_u16(&path, &map).unwrap();
    let back: Raster<f64> = load_external_map(&path, ExternalKind::Depth, Some((9, 13)), "v").unwrap();
    for (a, b) in map.data.iter().zip(&back.data) {
        assert!((a - b).abs() <= 1.0 / 65535.0);
    }
}

#[test]
fn ten_views_preprocess_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs: Vec<Raster<f64>> = (0..10).map(|_| random_gray(&mut rng, 64, 64)).collect();
    let t = Instant::now();
    for img in &imgs {
        quantize(&sml_map(img, 1, 3).unwrap(), 400).unwrap();
        quantize(&tenengrad_map(img, 3).unwrap(), 400).unwrap();
    }
    assert!(t.elapsed().as_secs_f64() < 2.0);
}
