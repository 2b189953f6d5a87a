use std::collections::BTreeMap;

use normdyn::model::{check_directional_identity, check_scale_invariance, grad_cores, reconstruct};
use normdyn::tensor::{contract, frobenius_inner};
use normdyn::{ContractionPlan, CoreSet, DenseTensor, ReconstructionSpec, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(dims: &[usize], r: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::random_normal(Shape::new(dims.to_vec()).unwrap(), 1.0, r)
}

fn close(a: &DenseTensor, b: &DenseTensor, tol: f64) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

/// Sum over every assignment of every label, one multiply-add per assignment.
fn naive_einsum(spec: &str, inputs: &[&DenseTensor]) -> DenseTensor {
    let (lhs, out) = spec.split_once("->").unwrap();
    let operands: Vec<Vec<char>> = lhs.split(',').map(|s| s.chars().collect()).collect();
    let out: Vec<char> = out.chars().collect();
    let mut extent = BTreeMap::new();
    for (labels, t) in operands.iter().zip(inputs) {
        for (l, &d) in labels.iter().zip(t.dims()) {
            extent.insert(*l, d);
        }
    }
    let labels: Vec<char> = extent.keys().copied().collect();
    let out_dims: Vec<usize> = out.iter().map(|l| extent[l]).collect();
    let out_shape = if out_dims.is_empty() { Shape::scalar() } else { Shape::new(out_dims.clone()).unwrap() };
    let mut result = vec![0.0; out_dims.iter().product()];
    let mut idx = vec![0usize; labels.len()];
    loop {
        let at = |l: &char| idx[labels.iter().position(|x| x == l).unwrap()];
        let mut prod = 1.0;
        for (ls, t) in operands.iter().zip(inputs) {
            let i: Vec<usize> = ls.iter().map(at).collect();
            prod *= t.get(&i).unwrap();
        }
        let flat = out.iter().zip(&out_dims).fold(0, |acc, (l, d)| acc * d + at(l));
        result[flat] += prod;
        // odometer
        let mut p = labels.len();
        loop {
            if p == 0 {
                return DenseTensor::from_vec(out_shape, result).unwrap();
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < extent[&labels[p]] {
                break;
            }
            idx[p] = 0;
        }
    }
}

#[test]
fn hand_contractions() {
    let a = DenseTensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let plan: ContractionPlan = "ij,jk->ik".parse().unwrap();
    assert_eq!(contract(&plan, &[&a, &DenseTensor::identity(2).unwrap()]).unwrap(), a);

    let x = DenseTensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = DenseTensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap();
    let dot = contract(&"i,i->".parse().unwrap(), &[&x, &y]).unwrap();
    assert_eq!(dot.data(), &[32.0]);
}

#[test]
fn matrix_chain_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b, c) = (normal(&[2, 2], &mut r), normal(&[2, 2], &mut r), normal(&[2, 2], &mut r));
    let got = contract(&"ij,jk,kl->il".parse().unwrap(), &[&a, &b, &c]).unwrap();
    let mut ab = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            for j in 0..2 {
                ab[i][k] += a.get(&[i, j]).unwrap() * b.get(&[j, k]).unwrap();
            }
        }
    }
    for i in 0..2 {
        for l in 0..2 {
            let mut want = 0.0;
            for k in 0..2 {
                want += ab[i][k] * c.get(&[k, l]).unwrap();
            }
            assert!((got.get(&[i, l]).unwrap() - want).abs() < 1e-14);
        }
    }
}

#[test]
fn cp_hand_outer_product() {
    let spec = ReconstructionSpec::cp(&[2, 2, 1], 1).unwrap();
    let cores = CoreSet::new(
        &spec,
        vec![
            DenseTensor::new(&[2, 1], vec![1.0, 2.0]).unwrap(),
            DenseTensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            DenseTensor::new(&[1, 1], vec![3.0]).unwrap(),
        ],
    )
    .unwrap();
    assert_eq!(reconstruct(&spec, &cores).unwrap().data(), &[3.0, 0.0, 6.0, 0.0]);
}

#[test]
fn tt_matches_full_index_sum() {
    let spec = ReconstructionSpec::tt(&[2, 2, 2], &[2, 2]).unwrap();
    let mut r = rng(2);
    let cores = CoreSet::random(&spec, 1.0, &mut r);
    let (g1, g2, g3) = (cores.core(0), cores.core(1), cores.core(2));
    let t = reconstruct(&spec, &cores).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let mut want = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        want += g1.get(&[i, a]).unwrap() * g2.get(&[a, j, b]).unwrap() * g3.get(&[b, k]).unwrap();
                    }
                }
                assert!((t.get(&[i, j, k]).unwrap() - want).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn tr_matches_full_index_sum() {
    let spec = ReconstructionSpec::tr(&[2, 3, 2], &[2, 3, 2]).unwrap();
    let mut r = rng(3);
    let cores = CoreSet::random(&spec, 1.0, &mut r);
    let (g1, g2, g3) = (cores.core(0), cores.core(1), cores.core(2));
    let t = reconstruct(&spec, &cores).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..2 {
                let mut want = 0.0;
                for a in 0..2 {
                    for b in 0..3 {
                        for c in 0..2 {
                            want += g1.get(&[a, i, b]).unwrap() * g2.get(&[b, j, c]).unwrap() * g3.get(&[c, k, a]).unwrap();
                        }
                    }
                }
                assert!((t.get(&[i, j, k]).unwrap() - want).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn cp_and_tucker_match_index_sums() {
    let mut r = rng(4);
    let cp = ReconstructionSpec::cp(&[2, 3, 2], 2).unwrap();
    let c = CoreSet::random(&cp, 1.0, &mut r);
    let tk = ReconstructionSpec::tucker(&[2, 3, 2], &[2, 2, 1]).unwrap();
    let u = CoreSet::random(&tk, 1.0, &mut r);
    let t_cp = reconstruct(&cp, &c).unwrap();
    let t_tk = reconstruct(&tk, &u).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..2 {
                let want_cp: f64 = (0..2)
                    .map(|q| c.core(0).get(&[i, q]).unwrap() * c.core(1).get(&[j, q]).unwrap() * c.core(2).get(&[k, q]).unwrap())
                    .sum();
                assert!((t_cp.get(&[i, j, k]).unwrap() - want_cp).abs() < 1e-13);
                let mut want_tk = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        want_tk += u.core(0).get(&[a, b, 0]).unwrap()
                            * u.core(1).get(&[i, a]).unwrap()
                            * u.core(2).get(&[j, b]).unwrap()
                            * u.core(3).get(&[k, 0]).unwrap();
                    }
                }
                assert!((t_tk.get(&[i, j, k]).unwrap() - want_tk).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn tucker2_gradient_matches_matrix_calculus() {
    let spec = ReconstructionSpec::tucker2(2, 2, 2, 2).unwrap();
    let mut r = rng(5);
    let cores = CoreSet::random(&spec, 1.0, &mut r);
    let y = normal(&[2, 2], &mut r);
    let t = reconstruct(&spec, &cores).unwrap();
    // f = ½||AGB − Y||², so ∇_T f = AGB − Y
    let resid = DenseTensor::new(&[2, 2], t.data().iter().zip(y.data()).map(|(a, b)| a - b).collect()).unwrap();
    let grads = grad_cores(&spec, &cores, &resid).unwrap();
    let mm = |s: &str, a: &DenseTensor, b: &DenseTensor| naive_einsum(s, &[a, b]);
    let (a, g, b) = (cores.core(0), cores.core(1), cores.core(2));
    let gb = mm("ij,jk->ik", g, b);
    let ag = mm("ij,jk->ik", a, g);
    assert!(close(&grads[0], &mm("ik,jk->ij", &resid, &gb), 1e-13));
    assert!(close(&grads[1], &naive_einsum("ia,ij,bj->ab", &[a, &resid, b]), 1e-13));
    assert!(close(&grads[2], &mm("ia,ij->aj", &ag, &resid), 1e-13));
}

#[test]
fn named_scalings_leave_the_model_unchanged() {
    let mut r = rng(6);
    let t2 = ReconstructionSpec::tucker2(4, 2, 3, 5).unwrap();
    let cores = CoreSet::random(&t2, 1.0, &mut r);
    assert_eq!(check_scale_invariance(&t2, &cores, &[1.0, 1.0, 1.0]).unwrap().residual, 0.0);
    assert!(check_scale_invariance(&t2, &cores, &[2.0, 0.5, 1.0]).unwrap().residual <= 1e-10);
    let cp = ReconstructionSpec::cp(&[3, 4, 2], 2).unwrap();
    let cores = CoreSet::random(&cp, 1.0, &mut r);
    assert!(check_scale_invariance(&cp, &cores, &[2.0, 3.0, 1.0 / 6.0]).unwrap().residual <= 1e-10);
}

#[test]
fn directional_identity_special_directions() {
    let mut r = rng(7);
    let spec = ReconstructionSpec::tucker2(3, 2, 2, 4).unwrap();
    let cores = CoreSet::random(&spec, 1.0, &mut r);
    let og = normal(&[3, 4], &mut r);
    for m in 0..3 {
        let zero = DenseTensor::zeros(spec.core_shapes()[m].clone());
        assert_eq!(check_directional_identity(&spec, &cores, m, &zero, &og).unwrap(), 0.0);
        // V = G_m puts the model itself in the slot: both sides are ⟨T, ∇_T f⟩
        assert!(check_directional_identity(&spec, &cores, m, cores.core(m), &og).unwrap() <= 1e-10);
        let grads = grad_cores(&spec, &cores, &og).unwrap();
        let t = reconstruct(&spec, &cores).unwrap();
        let lhs = frobenius_inner(&t, &og).unwrap();
        let rhs = frobenius_inner(cores.core(m), &grads[m]).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}

/// A random valid contraction: every label sits on one or two operands,
/// shared labels are summed and the rest form the output in random order.
fn random_plan(r: &mut ChaCha8Rng) -> (String, Vec<DenseTensor>) {
    let pool = ['a', 'b', 'c', 'd', 'e'];
    let n_labels = r.random_range(1..=5);
    let extents: Vec<usize> = (0..n_labels).map(|_| r.random_range(1..=3)).collect();
    let n_ops = r.random_range(1..=3);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_ops];
    let mut free = Vec::new();
    for l in 0..n_labels {
        let first = r.random_range(0..n_ops);
        members[first].push(l);
        if n_ops > 1 && r.random_bool(0.5) {
            let second = (first + r.random_range(1..n_ops)) % n_ops;
            members[second].push(l);
        } else {
            free.push(l);
        }
    }
    let mut operands = Vec::new();
    let mut tensors = Vec::new();
    for mut m in members.into_iter().filter(|m| !m.is_empty()) {
        for i in (1..m.len()).rev() {
            m.swap(i, r.random_range(0..=i));
        }
        operands.push(m.iter().map(|&l| pool[l]).collect::<String>());
        let dims: Vec<usize> = m.iter().map(|&l| extents[l]).collect();
        tensors.push(normal(&dims, r));
    }
    for i in (1..free.len()).rev() {
        free.swap(i, r.random_range(0..=i));
    }
    let out: String = free.iter().map(|&l| pool[l]).collect();
    (format!("{}->{}", operands.join(","), out), tensors)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn contraction_matches_naive_loops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (spec, tensors) = random_plan(&mut r);
        let refs: Vec<&DenseTensor> = tensors.iter().collect();
        let plan: ContractionPlan = spec.parse().unwrap();
        let got = contract(&plan, &refs).unwrap();
        let want = naive_einsum(&spec, &refs);
        prop_assert!(close(&got, &want, 1e-12), "{spec}: {:?} vs {:?}", got.data(), want.data());
    }

    #[test]
    fn contraction_is_linear_in_each_operand(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (spec, tensors) = random_plan(&mut r);
        let plan: ContractionPlan = spec.parse().unwrap();
        let slot = r.random_range(0..tensors.len());
        let y = normal(tensors[slot].dims(), &mut r);
        let x = &tensors[slot];
        let mix = DenseTensor::new(x.dims(), x.data().iter().zip(y.data()).map(|(a, b)| c * a + b).collect()).unwrap();
        let with = |t: &DenseTensor| {
            let mut refs: Vec<&DenseTensor> = tensors.iter().collect();
            refs[slot] = t;
            contract(&plan, &refs).unwrap()
        };
        let (tx, ty, tm) = (with(x), with(&y), with(&mix));
        let want = DenseTensor::from_vec(tx.shape().clone(), tx.data().iter().zip(ty.data()).map(|(a, b)| c * a + b).collect()).unwrap();
        prop_assert!(close(&tm, &want, 1e-12), "{spec}");
    }

    #[test]
    fn reconstruction_is_multilinear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let specs = [
            ReconstructionSpec::cp(&[3, 2, 2], 2).unwrap(),
            ReconstructionSpec::tucker(&[3, 2, 2], &[2, 2, 1]).unwrap(),
            ReconstructionSpec::tucker2(3, 2, 2, 3).unwrap(),
            ReconstructionSpec::tt(&[3, 2, 2], &[2, 2]).unwrap(),
            ReconstructionSpec::tr(&[3, 2, 2], &[2, 1, 2]).unwrap(),
        ];
        for spec in &specs {
            let cores = CoreSet::random(spec, 1.0, &mut r);
            let m = r.random_range(0..cores.len());
            let v = normal(spec.core_shapes()[m].dims(), &mut r);
            let w = normal(spec.core_shapes()[m].dims(), &mut r);
            let mix = DenseTensor::new(v.dims(), v.data().iter().zip(w.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let with = |t: &DenseTensor| {
                let mut c = cores.clone();
                c.replace(m, t.clone()).unwrap();
                reconstruct(spec, &c).unwrap()
            };
            let (tv, tw, tm) = (with(&v), with(&w), with(&mix));
            let want = DenseTensor::new(tv.dims(), tv.data().iter().zip(tw.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            prop_assert!(close(&tm, &want, 1e-12));
        }
    }

    #[test]
    fn unit_product_scalings_are_invisible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = ReconstructionSpec::tt(&[3, 2, 4], &[2, 3]).unwrap();
        let cores = CoreSet::random(&spec, 1.0, &mut r);
        let logs: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let mean = logs.iter().sum::<f64>() / 3.0;
        let c: Vec<f64> = logs.iter().map(|l| (l - mean).exp()).collect();
        prop_assert!(check_scale_invariance(&spec, &cores, &c).unwrap().residual <= 1e-10);
    }
}
