use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;
use ramdsir_core::rng::seeded;
use ramdsir_core::spectral::{
    dft2, idft2, low_freq_mask, mix_amplitudes, ram_augment, ram_augment_unclamped, FrequencyDecomposition, MixRatio,
};
use ramdsir_core::ImageTensor;

/// Direct double-loop DFT of every channel: `(re, im)` laid out like the image.
fn brute_dft(img: &ImageTensor, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = img.dims();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re = vec![0.0; h * w * c];
    let mut im = vec![0.0; h * w * c];
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let t = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let val = img.get(y, x, ch);
                        sr += val * t.cos();
                        si += val * t.sin();
                    }
                }
                re[img.index(u, v, ch)] = sr;
                im[img.index(u, v, ch)] = si;
            }
        }
    }
    (re, im)
}

/// Inverse of a complex spectrum given as `(re, im)`, scaled by `1/HW`.
fn brute_idft(re: &[f64], im: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out_re = vec![0.0; h * w * c];
    let mut out_im = vec![0.0; h * w * c];
    let scale = 1.0 / (h * w) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for u in 0..h {
                    for v in 0..w {
                        let t = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let k = (u * w + v) * c + ch;
                        sr += re[k] * t.cos() - im[k] * t.sin();
                        si += re[k] * t.sin() + im[k] * t.cos();
                    }
                }
                out_re[(y * w + x) * c + ch] = sr * scale;
                out_im[(y * w + x) * c + ch] = si * scale;
            }
        }
    }
    (out_re, out_im)
}

fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
    let mut rng = seeded(seed);
    ImageTensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn forward_matches_brute_force_on_random_shapes() {
    let mut rng = seeded(11);
    for case in 0..24 {
        let (h, w, c) = (rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=3));
        let img = random_image(100 + case, h, w, c);
        let d = dft2(&img).unwrap();
        let (re, im) = brute_dft(&img, false);
        for i in 0..re.len() {
            let a = d.amplitude.data()[i];
            let p = d.phase.data()[i];
            assert!((a * p.cos() - re[i]).abs() < 1e-9, "{h}x{w}x{c} re at {i}");
            assert!((a * p.sin() - im[i]).abs() < 1e-9, "{h}x{w}x{c} im at {i}");
        }
    }
}

#[test]
fn odd_shape_fixture() {
    let img = random_image(5, 5, 7, 2);
    let d = dft2(&img).unwrap();
    let (re, im) = brute_dft(&img, false);
    let worst = (0..re.len())
        .map(|i| (d.amplitude.data()[i] - re[i].hypot(im[i])).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn inverse_matches_brute_force() {
    let mut rng = seeded(12);
    for case in 0..20 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let amp = random_image(200 + case, h, w, 1).map(f64::abs);
        let phase = random_image(300 + case, h, w, 1).map(|v| v * PI);
        let rec = idft2(&FrequencyDecomposition { amplitude: amp.clone(), phase: phase.clone() }).unwrap();
        let re: Vec<f64> = amp.data().iter().zip(phase.data()).map(|(a, p)| a * p.cos()).collect();
        let im: Vec<f64> = amp.data().iter().zip(phase.data()).map(|(a, p)| a * p.sin()).collect();
        let (want_re, want_im) = brute_idft(&re, &im, h, w, 1);
        for i in 0..want_re.len() {
            assert!((rec.image.data()[i] - want_re[i]).abs() < 1e-9);
        }
        let want_residue = want_im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((rec.imag_residue - want_residue).abs() < 1e-9);
    }
}

#[test]
fn round_trip_16x16() {
    let img = random_image(3, 16, 16, 1);
    let back = idft2(&dft2(&img).unwrap()).unwrap();
    assert!(back.image.max_abs_diff(&img) < 1e-6);
    assert!(back.imag_residue < 1e-9);
}

#[test]
fn amplitude_is_centro_symmetric() {
    let img = random_image(8, 6, 10, 2);
    let d = dft2(&img).unwrap();
    let (h, w, c) = d.dims();
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let a = d.amplitude.get(u, v, ch);
                let b = d.amplitude.get((h - u) % h, (w - v) % w, ch);
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}

#[test]
fn ram_composition_matches_oracle() {
    let xk = random_image(21, 8, 8, 1);
    let xn = random_image(22, 8, 8, 1);
    let (beta, lambda) = (0.5, 0.7);
    let got = ram_augment_unclamped(&xk, &xn, beta, MixRatio::new(lambda).unwrap()).unwrap();

    let (kr, ki) = brute_dft(&xk, false);
    let (nr, ni) = brute_dft(&xn, false);
    let mask = low_freq_mask(8, 8, beta).unwrap();
    let mut re = vec![0.0; 64];
    let mut im = vec![0.0; 64];
    for i in 0..64 {
        let ak = kr[i].hypot(ki[i]);
        let an = nr[i].hypot(ni[i]);
        let a = if mask.values()[i] { (1.0 - lambda) * ak + lambda * an } else { ak };
        let p = ki[i].atan2(kr[i]);
        re[i] = a * p.cos();
        im[i] = a * p.sin();
    }
    let (want, _) = brute_idft(&re, &im, 8, 8, 1);
    let worst = got.image.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn phase_is_preserved_by_mixing() {
    let xk = random_image(31, 16, 16, 1);
    let xn = random_image(32, 16, 16, 1);
    let out = ram_augment_unclamped(&xk, &xn, 0.3, MixRatio::new(0.6).unwrap()).unwrap();
    let before = dft2(&xk).unwrap();
    let after = dft2(&out.image).unwrap();
    for i in 0..before.phase.data().len() {
        if after.amplitude.data()[i] <= 1e-8 {
            continue;
        }
        let mut diff = (after.phase.data()[i] - before.phase.data()[i]).abs();
        diff = diff.min(2.0 * PI - diff);
        assert!(diff < 1e-5, "phase drift {diff} at {i}");
    }
}

#[test]
fn full_mask_is_convex_combination() {
    let ak = random_image(41, 6, 6, 2).map(f64::abs);
    let an = random_image(42, 6, 6, 2).map(f64::abs);
    let mask = low_freq_mask(6, 6, 1.0).unwrap();
    let l = 0.35;
    let mixed = mix_amplitudes(&ak, &an, &mask, MixRatio::new(l).unwrap()).unwrap();
    for i in 0..mixed.data().len() {
        assert_eq!(mixed.data()[i], (1.0 - l) * ak.data()[i] + l * an.data()[i]);
    }
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=12, 1usize..=12, 1usize..=3, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_and_parseval((h, w, c, seed) in shape()) {
        let img = random_image(seed, h, w, c);
        let d = dft2(&img).unwrap();
        let back = idft2(&d).unwrap();
        prop_assert!(back.image.max_abs_diff(&img) < 1e-6);
        let energy: f64 = img.data().iter().map(|v| v * v).sum();
        let spectral: f64 = d.amplitude.data().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - spectral).abs() <= 1e-6 * energy.max(1e-12));
        prop_assert!(d.amplitude.data().iter().all(|&a| a >= 0.0));
        prop_assert!(d.phase.data().iter().all(|&p| p > -PI - 1e-12 && p <= PI));
    }

    #[test]
    fn mask_symmetry_and_extremes(h in 1usize..=20, w in 1usize..=20, beta in 0.0f64..=1.0) {
        let m = low_freq_mask(h, w, beta).unwrap();
        for u in 0..h {
            for v in 0..w {
                prop_assert_eq!(m.get(u, v), m.get((h - u) % h, (w - v) % w));
            }
        }
        prop_assert_eq!(low_freq_mask(h, w, 0.0).unwrap().count_ones(), 0);
        prop_assert_eq!(low_freq_mask(h, w, 1.0).unwrap().count_ones(), h * w);
    }

    #[test]
    fn ram_is_real_and_degenerates_cleanly(
        (h, w, c, seed) in shape(),
        beta in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let xk = random_image(seed, h, w, c);
        let xn = random_image(seed ^ 0x5555, h, w, c);
        let l = MixRatio::new(lambda).unwrap();
        let mixed = ram_augment_unclamped(&xk, &xn, beta, l).unwrap();
        prop_assert!(mixed.imag_residue < 1e-6);
        prop_assert!(ram_augment(&xk, &xk, beta, l).unwrap().max_abs_diff(&xk) < 1e-6);
        prop_assert!(ram_augment(&xk, &xn, beta, MixRatio::new(0.0).unwrap()).unwrap().max_abs_diff(&xk) < 1e-6);
        prop_assert!(ram_augment(&xk, &xn, 0.0, l).unwrap().max_abs_diff(&xk) < 1e-6);
        let out = ram_augment(&xk, &xn, beta, l).unwrap();
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
