//! Central finite-difference checks for every differentiable operation and
//! the full tiny-configuration model.
//!
//! Protocol: h = 1e-5 in f64; a gradient entry passes if the absolute gap to
//! the two-sided difference quotient is under 1e-8, or the relative error
//! (against the larger magnitude) is under 1e-4.

mod common;

use common::{fd_check, model_fd_check, randn, tiny_cfg};
use heliofuse_core::tensor::Tensor;

#[test]
fn grad_add_sub_mul() {
    let a = randn(&[3, 4], 100);
    let b = randn(&[3, 4], 101);
    fd_check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        t.sum_all(s).unwrap()
    }, "add");
    fd_check(&[a.clone(), b.clone()], |t, v| {
        let s = t.sub(v[0], v[1]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq).unwrap()
    }, "sub+mul");
    fd_check(&[a, b], |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        t.mean_all(s).unwrap()
    }, "mul");
}

#[test]
fn grad_broadcast_bias_and_gain() {
    let x = randn(&[2, 3, 4], 102);
    let b = randn(&[4], 103);
    fd_check(&[x.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq).unwrap()
    }, "broadcast add");
    fd_check(&[x, b], |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        t.sum_all(s).unwrap()
    }, "broadcast mul");
}

#[test]
fn grad_matmul_2d_and_batched() {
    let a = randn(&[4, 3], 104);
    let b = randn(&[3, 5], 105);
    fd_check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum_all(sq).unwrap()
    }, "matmul 2d");

    let a3 = randn(&[2, 3, 4], 106);
    let w = randn(&[4, 2], 107);
    fd_check(&[a3, w], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.mean_all(sq).unwrap()
    }, "matmul batched lhs");
}

#[test]
fn grad_bmm_both_orientations() {
    let a = randn(&[2, 3, 4], 108);
    let b = randn(&[2, 4, 3], 109);
    fd_check(&[a.clone(), b], |t, v| {
        let c = t.bmm(v[0], v[1], false).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum_all(sq).unwrap()
    }, "bmm");
    let bt = randn(&[2, 5, 4], 110);
    fd_check(&[a, bt], |t, v| {
        let c = t.bmm(v[0], v[1], true).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.sum_all(sq).unwrap()
    }, "bmm trans_b");
}

#[test]
fn grad_shape_ops() {
    let x = randn(&[2, 3, 4], 111);
    fd_check(&[x.clone()], |t, v| {
        let r = t.reshape(v[0], &[6, 4]).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum_all(sq).unwrap()
    }, "reshape");
    fd_check(&[x.clone()], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]).unwrap();
        let w = t.constant(randn(&[2, 3, 4], 112)); // mix entries so grads differ
        let pr = t.reshape(p, &[4, 2, 3]).unwrap();
        let _ = w;
        let sq = t.mul(pr, pr).unwrap();
        t.sum_all(sq).unwrap()
    }, "permute");
    let y = randn(&[2, 2, 4], 113);
    fd_check(&[x.clone(), y], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1).unwrap();
        let sq = t.mul(c, c).unwrap();
        t.mean_all(sq).unwrap()
    }, "concat");
    fd_check(&[x.clone()], |t, v| {
        let n = t.narrow(v[0], 1, 1, 2).unwrap();
        let sq = t.mul(n, n).unwrap();
        t.sum_all(sq).unwrap()
    }, "narrow");
    fd_check(&[x.clone()], |t, v| {
        let s = t.index_select(v[0], 1, &[0, 2, 2]).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq).unwrap()
    }, "index_select with duplicates");
    fd_check(&[x], |t, v| {
        let s = t.index_scatter(v[0], 1, &[1, 4, 2], 6).unwrap();
        let w = t.constant(randn(&[2, 6, 4], 114));
        let m = t.mul(s, w).unwrap();
        let sq = t.mul(m, m).unwrap();
        t.sum_all(sq).unwrap()
    }, "index_scatter");
}

#[test]
fn grad_reductions() {
    let x = randn(&[3, 4, 2], 115);
    for axis in 0..3 {
        fd_check(&[x.clone()], |t, v| {
            let m = t.mean_axis(v[0], axis).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum_all(sq).unwrap()
        }, &format!("mean axis {axis}"));
        fd_check(&[x.clone()], |t, v| {
            let s = t.sum_axis(v[0], axis).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.mean_all(sq).unwrap()
        }, &format!("sum axis {axis}"));
    }
}

#[test]
fn grad_softmax() {
    let x = randn(&[3, 5], 116);
    fd_check(&[x.clone()], |t, v| {
        let s = t.softmax(v[0], 1).unwrap();
        let w = t.constant(randn(&[3, 5], 117));
        let m = t.mul(s, w).unwrap();
        t.sum_all(m).unwrap()
    }, "softmax last axis");
    fd_check(&[x], |t, v| {
        let s = t.softmax(v[0], 0).unwrap();
        let w = t.constant(randn(&[3, 5], 118));
        let m = t.mul(s, w).unwrap();
        t.sum_all(m).unwrap()
    }, "softmax axis 0");
}

#[test]
fn grad_layer_norm() {
    let x = randn(&[4, 6], 119);
    let gamma = randn(&[6], 120);
    let beta = randn(&[6], 121);
    fd_check(&[x, gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let w = t.constant(randn(&[4, 6], 122));
        let m = t.mul(y, w).unwrap();
        let sq = t.mul(m, m).unwrap();
        t.sum_all(sq).unwrap()
    }, "layer_norm");
}

#[test]
fn grad_gelu() {
    let x = randn(&[5, 5], 123);
    fd_check(&[x], |t, v| {
        let y = t.gelu(v[0]).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    }, "gelu");
}

#[test]
fn grad_rotate_every_two() {
    let x = randn(&[3, 6], 124);
    fd_check(&[x], |t, v| {
        let y = t.rotate_every_two(v[0]).unwrap();
        let w = t.constant(randn(&[3, 6], 125));
        let m = t.mul(y, w).unwrap();
        t.sum_all(m).unwrap()
    }, "rotate_every_two");
}

#[test]
fn grad_dropout_with_frozen_mask() {
    // dropout draws its mask from the rng; replaying the same seeded rng per
    // evaluation freezes the mask so the difference quotient is well-defined
    let x = randn(&[4, 4], 126);
    fd_check(&[x], |t, v| {
        let mut rng = heliofuse_core::rng::SeedTree::new(900).rng();
        let y = t.dropout(v[0], 0.5, true, &mut rng).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    }, "dropout");
}

#[test]
fn grad_composite_expression() {
    // a little network: layer_norm -> linear -> gelu -> softmax -> weighted sum
    let x = randn(&[3, 4], 127);
    let w = randn(&[4, 4], 128);
    let gamma = Tensor::full(&[4], 1.0);
    let beta = Tensor::zeros(&[4]);
    fd_check(&[x, w, gamma, beta], |t, v| {
        let n = t.layer_norm(v[0], v[2], v[3], 1e-5).unwrap();
        let h = t.matmul(n, v[1]).unwrap();
        let g = t.gelu(h).unwrap();
        let s = t.softmax(g, 1).unwrap();
        let c = t.constant(randn(&[3, 4], 129));
        let m = t.mul(s, c).unwrap();
        t.sum_all(m).unwrap()
    }, "composite");
}

#[test]
fn grad_full_tiny_model_with_vq() {
    // end-to-end: embeddings, masking-free attention stacks, straight-through
    // quantization, fusion, decoder; every parameter against central
    // differences with the quantization plans frozen at the base point
    let (worst, checked) = model_fd_check(&tiny_cfg(), 5);
    assert!(checked > 3000, "only {checked} coordinates checked");
    assert!(worst < 1e-4, "worst gap {worst}");
}

#[test]
fn grad_fused_attention() {
    use heliofuse_core::rope::{build_rope_tables, positions_1d, tile_tables_per_group};
    // shared tables, frozen dropout
    let (b, heads, dh, nq, nkv) = (2, 2, 4, 3, 5);
    let h = heads * dh;
    let q = randn(&[b, nq, h], 300);
    let k = randn(&[b, nkv, h], 301);
    let v = randn(&[b, nkv, h], 302);
    let tq = build_rope_tables(&positions_1d(nq), dh, 128.0).unwrap();
    let tkv = build_rope_tables(&positions_1d(nkv), dh, 128.0).unwrap();
    fd_check(&[q.clone(), k.clone(), v.clone()], |t, vars| {
        let mut rng = heliofuse_core::rng::SeedTree::new(77).rng();
        let out = t
            .multi_head_attention(
                vars[0], vars[1], vars[2], &tq.sin, &tq.cos, &tkv.sin, &tkv.cos, heads, dh, 0.3, true,
                &mut rng,
            )
            .unwrap();
        let w = t.constant(randn(&[b, nq, h], 303));
        let m = t.mul(out, w).unwrap();
        t.sum_all(m).unwrap()
    }, "fused attention shared tables");

    // per-group kv tables (cross-attention with per-sample coordinates)
    let per: Vec<_> = (0..b)
        .map(|i| {
            let pos = Tensor::from_vec(vec![1, 2], vec![0.2 * i as f64, -0.3]).unwrap();
            build_rope_tables(&pos, dh, 16.0).unwrap().tile_rows(nkv).unwrap()
        })
        .collect();
    let tkv_pg = tile_tables_per_group(&per, heads).unwrap();
    fd_check(&[q, k, v], |t, vars| {
        let mut rng = heliofuse_core::rng::SeedTree::new(78).rng();
        let out = t
            .multi_head_attention(
                vars[0], vars[1], vars[2], &tq.sin, &tq.cos, &tkv_pg.sin, &tkv_pg.cos, heads, dh, 0.0,
                false, &mut rng,
            )
            .unwrap();
        let w = t.constant(randn(&[b, nq, h], 304));
        let m = t.mul(out, w).unwrap();
        t.sum_all(m).unwrap()
    }, "fused attention per-group tables");
}
