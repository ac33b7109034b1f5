use proptest::prelude::*;
use sslab_core::consistency::{masked_kl, DensePrediction};
use sslab_core::harness::compute_miou;
use sslab_core::image::{Image, LabelMap};
use sslab_core::models::{read_checkpoint, write_checkpoint};
use sslab_core::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use sslab_core::photometric::{apply_photometric, PhotometricParams};
use sslab_core::tps::{TpsWarp, Vec2};
use sslab_core::warp::{backward_warp_field, ValidityMask, WarpField};
use sslab_core::{Tape, Tensor};

fn point() -> impl Strategy<Value = Vec2> {
    (0.0..64.0f64, 0.0..64.0f64).prop_map(|(x, y)| Vec2::new(x, y))
}

/// Four control points with pairwise distance and triangle areas bounded
/// away from zero.
fn control_points() -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec(point(), 4).prop_filter("degenerate", |c| {
        let area = |a: Vec2, b: Vec2, q: Vec2| ((b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x)).abs();
        let far = (0..4).all(|i| (0..i).all(|j| (c[i].x - c[j].x).hypot(c[i].y - c[j].y) > 2.0));
        far && [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
            .iter()
            .all(|&(i, j, k)| area(c[i], c[j], c[k]) > 4.0)
    })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, h * w * 3).prop_map(move |d| Image::new(h, w, 3, d).unwrap())
}

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0f64, c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn photometric() -> impl Strategy<Value = PhotometricParams> {
    (
        -0.25..0.25f64,
        0.25..2.0f64,
        -36.0..36.0f64,
        0.25..2.0f64,
        Just([0usize, 1, 2]).prop_shuffle(),
    )
        .prop_map(|(brightness, saturation, hue, contrast, p)| PhotometricParams {
            brightness,
            saturation,
            hue,
            contrast,
            permutation: [p[0], p[1], p[2]],
        })
}

proptest! {
    #[test]
    fn tps_interpolates_its_constraints(c in control_points(), d in prop::collection::vec((-8.0..8.0f64, -8.0..8.0f64), 4)) {
        let d: Vec<Vec2> = d.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
        let warp = TpsWarp::fit(&c, &d).unwrap();
        for (ci, di) in c.iter().zip(&d) {
            let f = warp.eval(*ci);
            prop_assert!((f.x - di.x).abs() < 1e-9 && (f.y - di.y).abs() < 1e-9);
        }
    }

    #[test]
    fn tps_reproduces_affine_maps(c in control_points(), a in prop::array::uniform6(-0.3..0.3f64), q in point()) {
        let affine = |p: Vec2| Vec2::new(a[0] * p.x + a[1] * p.y + 10.0 * a[2], a[3] * p.x + a[4] * p.y + 10.0 * a[5]);
        let d: Vec<Vec2> = c.iter().map(|&p| affine(p)).collect();
        let warp = TpsWarp::fit(&c, &d).unwrap();
        prop_assert!(warp.coeffs_linf() < 1e-8);
        let (f, g) = (warp.eval(q), affine(q));
        prop_assert!((f.x - g.x).abs() < 1e-8 && (f.y - g.y).abs() < 1e-8);
    }

    #[test]
    fn integer_shift_is_exact(im in image(7, 9), dx in -4i64..=4, dy in -4i64..=4) {
        let (out, mask) = backward_warp_field(&im, &WarpField::constant(7, 9, Vec2::new(dx as f64, dy as f64))).unwrap();
        for y in 0..7i64 {
            for x in 0..9i64 {
                let (sx, sy) = (x - dx, y - dy);
                let inside = (0..9).contains(&sx) && (0..7).contains(&sy);
                prop_assert_eq!(mask.get(y as usize, x as usize), inside);
                if inside {
                    prop_assert_eq!(out.pixel(y as usize, x as usize), im.pixel(sy as usize, sx as usize));
                }
            }
        }
    }

    #[test]
    fn bilinear_output_stays_within_input_range(im in image(6, 6), dx in -2.0..2.0f64, dy in -2.0..2.0f64) {
        let (out, mask) = backward_warp_field(&im, &WarpField::constant(6, 6, Vec2::new(dx, dy))).unwrap();
        let (lo, hi) = im.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for y in 0..6 {
            for x in 0..6 {
                if mask.get(y, x) {
                    prop_assert!(out.pixel(y, x).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
                }
            }
        }
    }

    #[test]
    fn photometric_keeps_unit_range(im in image(4, 5), p in photometric()) {
        let out = apply_photometric(&im, &p).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(apply_photometric(&im, &PhotometricParams::IDENTITY).unwrap(), im);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(p in simplex(5), q in simplex(5)) {
        let one = ValidityMask::all_valid(1, 1);
        let (dp, dq) = (DensePrediction::new(1, 1, 5, p).unwrap(), DensePrediction::new(1, 1, 5, q).unwrap());
        prop_assert!(masked_kl(&dp, &dq, &one).unwrap().value >= -1e-12);
        prop_assert_eq!(masked_kl(&dp, &dp, &one).unwrap().value, 0.0);
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-30.0..30.0f64, 12)) {
        let mut tape = Tape::new();
        let p = tape.softmax(&Tensor::new(vec![3, 4], z).unwrap()).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn miou_is_a_bounded_score(pred in prop::collection::vec(1u8..=4, 30), truth in prop::collection::vec(0u8..=4, 30)) {
        prop_assume!(truth.iter().any(|&t| t != 0));
        let r = compute_miou(&pred, &truth, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        let fixed: Vec<u8> = truth.iter().map(|&t| t.max(1)).collect();
        prop_assert_eq!(compute_miou(&fixed, &fixed, 4).unwrap().miou, 1.0);
    }

    #[test]
    fn netpbm_round_trips(bytes in prop::collection::vec(any::<u8>(), 3 * 5 * 4), labels in prop::collection::vec(any::<u8>(), 20)) {
        let im = Image::new(5, 4, 3, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &im).unwrap();
        let back = read_ppm(buf.as_slice()).unwrap();
        prop_assert!(back.data().iter().zip(im.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let map = LabelMap::new(4, 5, labels).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &map).unwrap();
        prop_assert_eq!(read_pgm(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(values in prop::collection::vec(any::<f64>(), 1..20)) {
        let n = values.len();
        let state = vec![("w".to_string(), Tensor::new(vec![n], values).unwrap()), ("b".into(), Tensor::zeros(vec![1, 2]))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 2);
        for ((na, a), (nb, b)) in back.iter().zip(&state) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
