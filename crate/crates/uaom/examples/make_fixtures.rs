//! Regenerates the weight containers under `fixtures/`.
//!
//!     cargo run -p uaom --example make_fixtures -- crates/uaom/fixtures
//!
//! Reference activations are computed here with a direct loop convolution
//! that shares no code with the library, so the container self-check is an
//! independent comparison.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uaom::container::{write_container, ArrayJson, ReferenceActivation, TapOutput, OUTPUT_TAP};
use uaom_core::network::{InputSpec, Layer, NetworkModel};
use uaom_core::{ConvLayerSpec, Tensor};

const BACKBONE_SEED: u64 = 20_170_501;
const DESCRIPTOR_SEED: u64 = 128;
const TINY_SEED: u64 = 7;

/// Plain description of a layer for the reference path.
#[derive(Clone)]
enum Spec {
    Conv {
        name: String,
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        w: Vec<f32>, // [o][i][kh][kw]
        b: Vec<f32>,
    },
    Pool {
        name: String,
    },
}

impl Spec {
    fn name(&self) -> &str {
        match self {
            Spec::Conv { name, .. } | Spec::Pool { name } => name,
        }
    }

    fn to_layer(&self) -> Layer {
        match self.clone() {
            Spec::Conv {
                name,
                cout,
                cin,
                k,
                stride,
                pad,
                relu,
                w,
                b,
            } => Layer::Conv {
                name,
                spec: ConvLayerSpec::new(cout, cin, k, k, stride, pad, relu, w, b).unwrap(),
            },
            Spec::Pool { name } => Layer::MaxPool { name },
        }
    }
}

/// Activation as `[c][y][x]` in f64.
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

fn naive_layer(x: &Act, s: &Spec) -> Act {
    match s {
        Spec::Conv {
            cout,
            cin,
            k,
            stride,
            pad,
            relu,
            w,
            b,
            ..
        } => {
            assert_eq!(*cin, x.c);
            let oh = (x.h + 2 * pad - k) / stride + 1;
            let ow = (x.w + 2 * pad - k) / stride + 1;
            let mut v = vec![0.0; cout * oh * ow];
            for o in 0..*cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o] as f64;
                        for i in 0..*cin {
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let iy = (oy * stride + ky) as i64 - *pad as i64;
                                    let ix = (ox * stride + kx) as i64 - *pad as i64;
                                    if iy < 0 || ix < 0 || iy >= x.h as i64 || ix >= x.w as i64 {
                                        continue;
                                    }
                                    let wv = w[((o * cin + i) * k + ky) * k + kx] as f64;
                                    acc += wv * x.v[(i * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        if *relu {
                            acc = acc.max(0.0);
                        }
                        v[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Act {
                c: *cout,
                h: oh,
                w: ow,
                v,
            }
        }
        Spec::Pool { .. } => {
            let (oh, ow) = (x.h / 2, x.w / 2);
            let mut v = vec![0.0; x.c * oh * ow];
            for c in 0..x.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let at = |dy: usize, dx: usize| x.v[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                        v[(c * oh + y) * ow + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            Act {
                c: x.c,
                h: oh,
                w: ow,
                v,
            }
        }
    }
}

fn to_array(a: &Act, unit_norm: bool) -> ArrayJson {
    let mut data = vec![0.0f64; a.h * a.w * a.c];
    for c in 0..a.c {
        for y in 0..a.h {
            for x in 0..a.w {
                data[(y * a.w + x) * a.c + c] = a.v[(c * a.h + y) * a.w + x];
            }
        }
    }
    if unit_norm {
        for px in data.chunks_mut(a.c) {
            let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                px.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    ArrayJson {
        shape: [a.h, a.w, a.c],
        data: data.into_iter().map(|v| v as f32).collect(),
    }
}

/// Runs the reference path on `input` (single channel, `[0, 1]`), recording
/// the named taps and, if asked, the normalized full output.
fn reference(
    specs: &[Spec],
    mean: f64,
    std: f64,
    input: &Tensor,
    taps: &[&str],
    output: Option<bool>,
) -> ReferenceActivation {
    let mut x = Act {
        c: 1,
        h: input.height(),
        w: input.width(),
        v: input.data().iter().map(|v| (*v as f64 - mean) / std).collect(),
    };
    let mut outputs = Vec::new();
    for s in specs {
        x = naive_layer(&x, s);
        if taps.contains(&s.name()) {
            outputs.push(TapOutput {
                tap: s.name().into(),
                value: to_array(&x, false),
            });
        }
    }
    if let Some(unit_norm) = output {
        outputs.push(TapOutput {
            tap: OUTPUT_TAP.into(),
            value: to_array(&x, unit_norm),
        });
    }
    ReferenceActivation {
        input: ArrayJson::from_tensor(input),
        outputs,
    }
}

fn build(specs: &[Spec], mean: f32, std: f32, fixed: Option<usize>, taps: &[&str], unit_norm: bool) -> NetworkModel {
    let taps: Vec<String> = taps.iter().map(|t| t.to_string()).collect();
    NetworkModel::new(
        InputSpec {
            channels: 1,
            height: fixed,
            width: fixed,
            mean: vec![mean],
            std: vec![std],
        },
        specs.iter().map(Spec::to_layer).collect(),
        &taps,
        unit_norm,
    )
    .unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0..1.0))
}

/// Rotated Sobel kernels at 0, 45, 90 and 135 degrees.
fn oriented_kernels() -> [[f32; 9]; 4] {
    [
        [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        [-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0],
        [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        [0.0, -1.0, -2.0, 1.0, 0.0, -1.0, 2.0, 1.0, 0.0],
    ]
}

/// Removes each kernel's mean over its taps, so random filters respond to
/// local contrast only.
fn zero_sum_taps(w: &mut [f32]) {
    for k in w.chunks_mut(9) {
        let m = k.iter().sum::<f32>() / 9.0;
        k.iter_mut().for_each(|v| *v -= m);
    }
}

/// A 3x3 conv whose first `cin` outputs are binomially smoothed copies of
/// the inputs and whose remaining outputs are zero-sum He-initialized
/// mixtures.
fn carry_conv(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Spec {
    let n = Normal::new(0.0f32, (2.0 / (9.0 * cin as f32)).sqrt()).unwrap();
    let mut w: Vec<f32> = (0..cout * cin * 9).map(|_| n.sample(rng)).collect();
    zero_sum_taps(&mut w);
    for o in 0..cin {
        for i in 0..cin {
            for t in 0..9 {
                w[(o * cin + i) * 9 + t] = if i == o { SMOOTH[t] } else { 0.0 };
            }
        }
    }
    Spec::Conv {
        name: name.into(),
        cout,
        cin,
        k: 3,
        stride: 1,
        pad: 1,
        relu: true,
        w,
        b: vec![0.0; cout],
    }
}

const SMOOTH: [f32; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

/// VGG-like five-tap backbone. A hidden first conv splits oriented
/// gradients into positive and negative halves; `relu1_1` sees each pair
/// only through its sum, so every tapped activation ignores contrast
/// polarity. Later convs carry smoothed copies of their inputs next to
/// random mixtures, which keeps segments close to invertible.
fn backbone_specs() -> Vec<Spec> {
    let mut rng = ChaCha8Rng::seed_from_u64(BACKBONE_SEED);
    let mut w0 = Vec::with_capacity(8 * 9);
    for k in oriented_kernels() {
        w0.extend(k.iter().map(|v| v / 4.0));
        w0.extend(k.iter().map(|v| -v / 4.0));
    }
    let mut specs = vec![Spec::Conv {
        name: "conv1_0".into(),
        cout: 8,
        cin: 1,
        k: 3,
        stride: 1,
        pad: 1,
        relu: true,
        w: w0,
        b: vec![0.0; 8],
    }];
    let cout1 = 8;
    let mut w1 = vec![0.0f32; cout1 * 8 * 9];
    for o in 0..cout1 {
        let spatial: Vec<f32> = if o < 4 {
            SMOOTH.to_vec()
        } else {
            let mut k: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0) / 2.0).collect();
            zero_sum_taps(&mut k);
            k
        };
        for orient in 0..4 {
            let g: f32 = if o < 4 {
                if orient == o { 1.0 } else { 0.0 }
            } else {
                rng.random_range(-0.5..1.0)
            };
            for half in 0..2 {
                let i = 2 * orient + half;
                for t in 0..9 {
                    w1[(o * 8 + i) * 9 + t] = g * spatial[t];
                }
            }
        }
    }
    specs.push(Spec::Conv {
        name: "relu1_1".into(),
        cout: cout1,
        cin: 8,
        k: 3,
        stride: 1,
        pad: 1,
        relu: true,
        w: w1,
        b: vec![0.0; cout1],
    });
    let chans = [8usize, 16, 24, 32, 40];
    for l in 2..=5 {
        specs.push(Spec::Pool {
            name: format!("pool{}", l - 1),
        });
        specs.push(carry_conv(&mut rng, &format!("relu{l}_1"), chans[l - 2], chans[l - 1]));
    }
    specs
}

/// Box-pools a normalized 32x32 patch to 8x8 and projects it onto 128
/// Gaussian directions.
fn descriptor_specs() -> Vec<Spec> {
    let mut rng = ChaCha8Rng::seed_from_u64(DESCRIPTOR_SEED);
    let n = Normal::new(0.0f32, 1.0 / 8.0).unwrap();
    vec![
        Spec::Conv {
            name: "pool4x4".into(),
            cout: 1,
            cin: 1,
            k: 4,
            stride: 4,
            pad: 0,
            relu: false,
            w: vec![1.0 / 16.0; 16],
            b: vec![0.0],
        },
        Spec::Conv {
            name: "project".into(),
            cout: 128,
            cin: 1,
            k: 8,
            stride: 1,
            pad: 0,
            relu: false,
            w: (0..128 * 64).map(|_| n.sample(&mut rng)).collect(),
            b: vec![0.0; 128],
        },
    ]
}

/// Two 3x3 convolutions, tapped after the first.
fn tiny_specs() -> Vec<Spec> {
    let mut rng = ChaCha8Rng::seed_from_u64(TINY_SEED);
    let mut conv = |name: &str, cin: usize, cout: usize, relu: bool| Spec::Conv {
        name: name.into(),
        cout,
        cin,
        k: 3,
        stride: 1,
        pad: 1,
        relu,
        w: (0..cout * cin * 9).map(|_| rng.random_range(-0.5..0.5)).collect(),
        b: (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect(),
    };
    vec![conv("conv1", 1, 4, true), conv("conv2", 4, 2, false)]
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/uaom/fixtures".into()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let specs = backbone_specs();
    let taps = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];
    let model = build(&specs, 0.5, 0.25, None, &taps, false);
    let refs = vec![reference(&specs, 0.5, 0.25, &random_image(&mut rng, 32, 32), &taps, None)];
    write_container(dir.join("backbone.uaom"), &model, &refs, Some(BACKBONE_SEED)).unwrap();

    let specs = descriptor_specs();
    let model = build(&specs, 0.0, 1.0, Some(32), &[], true);
    let patch = Tensor::from_fn(32, 32, 1, |_, _, _| rng.random_range(-1.5..1.5));
    let refs = vec![reference(&specs, 0.0, 1.0, &patch, &[], Some(true))];
    write_container(dir.join("descriptor.uaom"), &model, &refs, Some(DESCRIPTOR_SEED)).unwrap();

    let specs = tiny_specs();
    let model = build(&specs, 0.0, 1.0, None, &["conv1"], false);
    let ones = Tensor::from_fn(6, 5, 1, |_, _, _| 1.0);
    let refs = vec![
        reference(&specs, 0.0, 1.0, &ones, &["conv1"], Some(false)),
        reference(&specs, 0.0, 1.0, &random_image(&mut rng, 7, 9), &["conv1"], Some(false)),
    ];
    write_container(dir.join("tiny.uaom"), &model, &refs, Some(TINY_SEED)).unwrap();
    println!("fixtures written to {}", dir.display());
}
