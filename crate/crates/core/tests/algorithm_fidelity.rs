//! The sequence block and the fusion block are each checked against an
//! independent straight-line re-execution of their defining computation:
//! plain nested loops over flat `f64` buffers, no tape, no shared kernels.

use hyperssm_core::fusion::{
    bind_cross_fusion, cross_fusion_forward, cross_fusion_t, register_cross_fusion, GateSource,
};
use hyperssm_core::params::ParamSet;
use hyperssm_core::ssm::{mamba_block_forward, register_mamba_block, SsmDims};
use hyperssm_core::tape::Tape;
use hyperssm_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Straight-line reference pieces
// ---------------------------------------------------------------------------

fn ref_layer_norm(x: &[f64], rows: usize, c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

fn ref_linear(
    x: &[f64],
    rows: usize,
    d_in: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    d_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc = 0.0;
            for i in 0..d_in {
                acc += x[r * d_in + i] * w[i * d_out + j];
            }
            out[r * d_out + j] = acc + bias.map_or(0.0, |b| b[j]);
        }
    }
    out
}

fn ref_silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
}

fn ref_softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn ref_causal_conv(x: &[f64], b: usize, n: usize, m: usize, k: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for t in 0..n {
            for ch in 0..m {
                let mut acc = 0.0;
                for j in 0..w {
                    let shift = w - 1 - j;
                    if t >= shift {
                        acc += k[ch * w + j] * x[(bi * n + (t - shift)) * m + ch];
                    }
                }
                out[(bi * n + t) * m + ch] = acc;
            }
        }
    }
    out
}

/// Conv + SiLU + projections + discretization + recurrence + readout for
/// one scan pipeline, written as one literal pass.
#[allow(clippy::too_many_arguments)]
fn ref_scan_pipeline(
    x: &[f64],
    b: usize,
    n: usize,
    m: usize,
    l: usize,
    w: usize,
    params: &ParamSet<f64>,
    prefix: &str,
) -> Vec<f64> {
    let get = |name: &str| params.get(&format!("{prefix}.{name}")).unwrap().data();
    let conv = ref_causal_conv(x, b, n, m, get("conv.kernels"), w);
    let xp = ref_silu(&conv);
    let rows = b * n;
    let bmat = ref_linear(&xp, rows, m, get("b.weight"), Some(get("b.bias")), l);
    let cmat = ref_linear(&xp, rows, m, get("c.weight"), Some(get("c.bias")), l);
    let mut delta = ref_linear(&xp, rows, m, get("delta.weight"), None, m);
    let dbias = get("delta.bias");
    for r in 0..rows {
        for ch in 0..m {
            delta[r * m + ch] = ref_softplus(delta[r * m + ch] + dbias[ch]);
        }
    }
    let a_log = get("a_log");

    let mut y = vec![0.0; b * n * m];
    for bi in 0..b {
        for ch in 0..m {
            let mut h = vec![0.0; l];
            for t in 0..n {
                let dt = delta[(bi * n + t) * m + ch];
                let xv = xp[(bi * n + t) * m + ch];
                let mut acc = 0.0;
                for s in 0..l {
                    let a = -a_log[ch * l + s].exp();
                    let u = dt * a;
                    let a_bar = u.exp();
                    let phi = if u.abs() < 1e-4 {
                        1.0 + u / 2.0
                    } else {
                        (u.exp() - 1.0) / u
                    };
                    let b_bar = phi * dt * bmat[(bi * n + t) * l + s];
                    h[s] = a_bar * h[s] + b_bar * xv;
                    acc += cmat[(bi * n + t) * l + s] * h[s];
                }
                y[(bi * n + t) * m + ch] = acc;
            }
        }
    }
    y
}

fn ref_mamba_block(
    input: &[f64],
    b: usize,
    n: usize,
    dims: &SsmDims,
    params: &ParamSet<f64>,
    prefix: &str,
) -> Vec<f64> {
    let (c, m) = (dims.channels, dims.inner);
    let get = |name: &str| params.get(&format!("{prefix}.{name}")).unwrap().data();
    let rows = b * n;
    let normed = ref_layer_norm(input, rows, c, get("ln.gamma"), get("ln.beta"));
    let x = ref_linear(&normed, rows, c, get("in_x.weight"), Some(get("in_x.bias")), m);
    let z = ref_linear(&normed, rows, c, get("in_z.weight"), Some(get("in_z.bias")), m);
    let y = ref_scan_pipeline(&x, b, n, m, dims.state, dims.conv_width, params, prefix);
    let gate = ref_silu(&z);
    let gated: Vec<f64> = y.iter().zip(&gate).map(|(a, g)| a * g).collect();
    let projected = ref_linear(&gated, rows, m, get("out.weight"), Some(get("out.bias")), c);
    projected.iter().zip(input).map(|(p, i)| p + i).collect()
}

fn ref_cross_fusion(
    audio: &[f64],
    visual: &[f64],
    b: usize,
    n: usize,
    dims: &SsmDims,
    params: &ParamSet<f64>,
    prefix: &str,
) -> (Vec<f64>, Vec<f64>) {
    let (c, m) = (dims.channels, dims.inner);
    let rows = b * n;
    let get = |name: &str| params.get(&format!("{prefix}.{name}")).unwrap().data();

    let run_modality = |input: &[f64], mp: &str| -> Vec<f64> {
        let normed = ref_layer_norm(
            input,
            rows,
            c,
            get(&format!("{mp}.ln.gamma")),
            get(&format!("{mp}.ln.beta")),
        );
        let x = ref_linear(
            &normed,
            rows,
            c,
            get(&format!("{mp}.in.weight")),
            Some(get(&format!("{mp}.in.bias"))),
            m,
        );
        ref_scan_pipeline(
            &x,
            b,
            n,
            m,
            dims.state,
            dims.conv_width,
            params,
            &format!("{prefix}.{mp}"),
        )
    };
    let ya = run_modality(audio, "audio");
    let yv = run_modality(visual, "visual");

    // Gate from the normalized visual stream only.
    let normed_v = ref_layer_norm(
        visual,
        rows,
        c,
        get("visual.ln.gamma"),
        get("visual.ln.beta"),
    );
    let z = ref_linear(
        &normed_v,
        rows,
        c,
        get("gate.weight"),
        Some(get("gate.bias")),
        m,
    );
    let gate = ref_silu(&z);

    let summed: Vec<f64> = ya
        .iter()
        .zip(&yv)
        .zip(&gate)
        .map(|((a, v), g)| a * g + v * g)
        .collect();
    let out_a = ref_linear(
        &summed,
        rows,
        m,
        get("audio.out.weight"),
        Some(get("audio.out.bias")),
        c,
    );
    let out_v = ref_linear(
        &summed,
        rows,
        m,
        get("visual.out.weight"),
        Some(get("visual.out.bias")),
        c,
    );
    (
        out_a.iter().zip(audio).map(|(p, i)| p + i).collect(),
        out_v.iter().zip(visual).map(|(p, i)| p + i).collect(),
    )
}

// ---------------------------------------------------------------------------
// Fidelity checks
// ---------------------------------------------------------------------------

#[test]
fn mamba_block_matches_straight_line_reference() {
    for seed in [1u64, 2, 3] {
        let dims = SsmDims {
            channels: 6,
            inner: 12,
            state: 4,
            conv_width: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::<f64>::new();
        register_mamba_block(&mut params, "blk", &dims, &mut rng).unwrap();
        let (b, n) = (2usize, 7usize);
        let input = Tensor::<f64>::uniform(vec![b, n, dims.channels], -1.0, 1.0, &mut rng);

        let got = mamba_block_forward(&input, &params, "blk").unwrap();
        let expect = ref_mamba_block(input.data(), b, n, &dims, &params, "blk");
        let diff = got
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-9, "seed {seed}: block deviates {diff}");
    }
}

#[test]
fn cross_fusion_matches_straight_line_reference() {
    for seed in [4u64, 5, 6] {
        let dims = SsmDims {
            channels: 5,
            inner: 10,
            state: 3,
            conv_width: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::<f64>::new();
        register_cross_fusion(&mut params, "cfb", &dims, &mut rng).unwrap();
        let (b, n) = (2usize, 6usize);
        let audio = Tensor::<f64>::uniform(vec![b, n, dims.channels], -1.0, 1.0, &mut rng);
        let visual = Tensor::<f64>::uniform(vec![b, n, dims.channels], -1.0, 1.0, &mut rng);

        let (got_a, got_v) =
            cross_fusion_forward(&audio, &visual, &params, "cfb", GateSource::Visual).unwrap();
        let (exp_a, exp_v) =
            ref_cross_fusion(audio.data(), visual.data(), b, n, &dims, &params, "cfb");
        let max_diff = |g: &Tensor<f64>, e: &[f64]| {
            g.data()
                .iter()
                .zip(e)
                .map(|(a, x)| (a - x).abs())
                .fold(0.0f64, f64::max)
        };
        assert!(max_diff(&got_a, &exp_a) < 1e-9, "seed {seed}: audio stream");
        assert!(max_diff(&got_v, &exp_v) < 1e-9, "seed {seed}: visual stream");
    }
}

#[test]
fn gate_depends_only_on_the_visual_stream_bitwise() {
    let dims = SsmDims {
        channels: 5,
        inner: 10,
        state: 3,
        conv_width: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::<f64>::new();
    register_cross_fusion(&mut params, "cfb", &dims, &mut rng).unwrap();
    let visual = Tensor::<f64>::uniform(vec![2, 6, dims.channels], -1.0, 1.0, &mut rng);
    let audio_1 = Tensor::<f64>::uniform(vec![2, 6, dims.channels], -1.0, 1.0, &mut rng);
    let audio_2 = Tensor::<f64>::uniform(vec![2, 6, dims.channels], -1.0, 1.0, &mut rng);

    let gate_values = |audio: &Tensor<f64>| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let vars = bind_cross_fusion(&mut tape, &bound, "cfb").unwrap();
        let a = tape.constant(audio.clone());
        let v = tape.constant(visual.clone());
        let out = cross_fusion_t(&mut tape, a, v, &vars, GateSource::Visual).unwrap();
        tape.value(out.gate).data().to_vec()
    };
    let g1 = gate_values(&audio_1);
    let g2 = gate_values(&audio_2);
    let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1), bits(&g2), "gate must ignore the audio stream");
}

#[test]
fn residual_identity_is_exact_for_both_blocks() {
    let dims = SsmDims {
        channels: 4,
        inner: 8,
        state: 3,
        conv_width: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut block = ParamSet::<f64>::new();
    register_mamba_block(&mut block, "blk", &dims, &mut rng).unwrap();
    *block.get_mut("blk.out.weight").unwrap() = Tensor::zeros(vec![dims.inner, dims.channels]);
    let x = Tensor::<f64>::uniform(vec![1, 5, dims.channels], -1.0, 1.0, &mut rng);
    assert_eq!(
        mamba_block_forward(&x, &block, "blk").unwrap().data(),
        x.data()
    );

    let mut cfb = ParamSet::<f64>::new();
    register_cross_fusion(&mut cfb, "cfb", &dims, &mut rng).unwrap();
    for m in ["audio", "visual"] {
        *cfb.get_mut(&format!("cfb.{m}.out.weight")).unwrap() =
            Tensor::zeros(vec![dims.inner, dims.channels]);
    }
    let a = Tensor::<f64>::uniform(vec![1, 5, dims.channels], -1.0, 1.0, &mut rng);
    let v = Tensor::<f64>::uniform(vec![1, 5, dims.channels], -1.0, 1.0, &mut rng);
    let (oa, ov) = cross_fusion_forward(&a, &v, &cfb, "cfb", GateSource::Visual).unwrap();
    assert_eq!(oa.data(), a.data());
    assert_eq!(ov.data(), v.data());
}

#[test]
fn cross_fusion_causality_along_time() {
    let dims = SsmDims {
        channels: 4,
        inner: 8,
        state: 3,
        conv_width: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::<f64>::new();
    register_cross_fusion(&mut params, "cfb", &dims, &mut rng).unwrap();
    let (b, n, c) = (1usize, 8usize, dims.channels);
    let audio = Tensor::<f64>::uniform(vec![b, n, c], -1.0, 1.0, &mut rng);
    let visual = Tensor::<f64>::uniform(vec![b, n, c], -1.0, 1.0, &mut rng);
    let (base_a, base_v) =
        cross_fusion_forward(&audio, &visual, &params, "cfb", GateSource::Visual).unwrap();

    let cut = 3usize;
    let bump_after = |t: &Tensor<f64>| {
        let mut data = t.data().to_vec();
        for ti in (cut + 1)..n {
            for j in 0..c {
                data[ti * c + j] += 0.7;
            }
        }
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    let (pa, pv) = cross_fusion_forward(
        &bump_after(&audio),
        &bump_after(&visual),
        &params,
        "cfb",
        GateSource::Visual,
    )
    .unwrap();
    for ti in 0..=cut {
        for j in 0..c {
            let i = ti * c + j;
            assert_eq!(base_a.data()[i].to_bits(), pa.data()[i].to_bits());
            assert_eq!(base_v.data()[i].to_bits(), pv.data()[i].to_bits());
        }
    }
}
