use proptest::prelude::*;
use ramdsir_core::metrics::{asd_metric, dice_metric, domain_spread, score_sample, summarize, Mask};
use ramdsir_core::{Error, ImageTensor};

/// Foreground pixels touching background (4-neighbourhood) or the border.
fn oracle_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height() as isize, m.width() as isize);
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn oracle_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / from.len() as f64
}

fn oracle_asd(a: &Mask, b: &Mask) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    0.5 * (oracle_directed(&ba, &bb) + oracle_directed(&bb, &ba))
}

fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Mask {
    let mut m = Mask::empty(h, w);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            m.set(y, x, true);
        }
    }
    m
}

#[test]
fn dice_fixtures() {
    let p = rect(4, 4, 0, 0, 2, 2);
    let g = Mask::new(4, 4, (0..16).map(|i| [0, 1, 4, 2, 3, 6].contains(&i)).collect()).unwrap();
    assert_eq!(dice_metric(&p, &g).unwrap(), 0.6);
    assert_eq!(dice_metric(&p, &p).unwrap(), 1.0);
    assert_eq!(dice_metric(&p, &rect(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
    assert_eq!(dice_metric(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
    assert!(dice_metric(&Mask::empty(3, 3), &Mask::empty(3, 4)).is_err());
}

#[test]
fn asd_fixtures() {
    let a = rect(5, 8, 2, 1, 1, 1);
    let b = rect(5, 8, 2, 4, 1, 1);
    assert_eq!(asd_metric(&a, &b).unwrap(), 3.0);
    let sq = rect(8, 8, 2, 2, 3, 3);
    assert_eq!(asd_metric(&sq, &sq).unwrap(), 0.0);
    let shifted = rect(8, 8, 2, 3, 3, 3);
    assert_eq!(asd_metric(&sq, &shifted).unwrap(), oracle_asd(&sq, &shifted));
    assert!(matches!(asd_metric(&Mask::empty(8, 8), &sq), Err(Error::UndefinedMetric(_))));
}

#[test]
fn empty_masks_are_excluded_from_asd_averages() {
    let label = ImageTensor::from_fn(6, 6, 1, |y, x, _| f64::from(u8::from((1..4).contains(&y) && (1..4).contains(&x))));
    let hit = score_sample(&label, &label).unwrap();
    let miss = score_sample(&ImageTensor::zeros(6, 6, 1), &label).unwrap();
    assert_eq!(miss.asd, vec![None]);
    let s = summarize(&[hit, miss]).unwrap();
    assert_eq!(s[0].asd, Some(0.0));
    assert_eq!(s[0].asd_excluded, 1);
    assert_eq!(s[0].dice, 0.5);
}

#[test]
fn spread_of_constant_domains() {
    for c in 1..=3 {
        let lo = ImageTensor::filled(4, 4, c, -0.5);
        let hi = ImageTensor::filled(4, 4, c, 0.5);
        let s = domain_spread(&[vec![&lo, &lo], vec![&hi, &hi]]).unwrap();
        assert!((s - (c as f64).sqrt()).abs() < 1e-12, "{c} channels: {s}");
        assert_eq!(domain_spread(&[vec![&lo, &hi], vec![&lo, &hi]]).unwrap(), 0.0);
    }
    let one = ImageTensor::zeros(2, 2, 1);
    assert!(domain_spread(&[vec![&one, &one]]).is_err());
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=32, 1usize..=32).prop_flat_map(|(h, w)| {
        let bits = move || prop::collection::vec(prop::bool::weighted(0.3), h * w);
        (bits(), bits()).prop_filter_map("both masks need a foreground pixel", move |(a, b)| {
            let (a, b) = (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap());
            (a.count() > 0 && b.count() > 0).then_some((a, b))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn asd_matches_brute_force((a, b) in mask_pair()) {
        prop_assert_eq!(a.boundary(), oracle_boundary(&a));
        prop_assert_eq!(asd_metric(&a, &b).unwrap(), oracle_asd(&a, &b));
    }

    #[test]
    fn metrics_are_symmetric((a, b) in mask_pair()) {
        prop_assert_eq!(dice_metric(&a, &b).unwrap(), dice_metric(&b, &a).unwrap());
        prop_assert_eq!(asd_metric(&a, &b).unwrap(), asd_metric(&b, &a).unwrap());
        let d = dice_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(asd_metric(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn asd_is_translation_invariant(
        (h, w) in (2usize..=12, 2usize..=12),
        seed_a in prop::collection::vec(prop::bool::weighted(0.4), 144),
        seed_b in prop::collection::vec(prop::bool::weighted(0.4), 144),
        (dy, dx) in (0usize..6, 0usize..6),
    ) {
        let pick = |s: &[bool], y: usize, x: usize| s[y * 12 + x];
        let (big_h, big_w) = (h + 8, w + 8);
        let place = |s: &[bool], oy: usize, ox: usize| {
            let mut m = Mask::empty(big_h, big_w);
            for y in 0..h {
                for x in 0..w {
                    m.set(y + oy, x + ox, pick(s, y, x));
                }
            }
            m
        };
        let (a0, b0) = (place(&seed_a, 1, 1), place(&seed_b, 1, 1));
        prop_assume!(a0.count() > 0 && b0.count() > 0);
        let (a1, b1) = (place(&seed_a, 1 + dy, 1 + dx), place(&seed_b, 1 + dy, 1 + dx));
        let (d0, d1) = (asd_metric(&a0, &b0).unwrap(), asd_metric(&a1, &b1).unwrap());
        prop_assert!((d0 - d1).abs() < 1e-12, "{} vs {}", d0, d1);
    }
}
