//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Feature maps are stored token-major: an `H × W × C` map is a
//! `(H·W) × C` matrix whose row `y·W + x` holds the channels of pixel
//! `(y, x)`. Convolutions lower to `im2col` followed by a matrix product.

use ndarray::{s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 × C` row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    Im2Col { src: Var, height: usize, width: usize, stride: usize },
    Upsample2x { src: Var, height: usize, width: usize },
    ConcatCols(Var, Var),
    /// Mean squared error against a constant target.
    Mse { pred: Var, target: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub(crate) fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub(crate) fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub(crate) fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub(crate) fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub(crate) fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub(crate) fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub(crate) fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// 3×3 patches with zero padding of one pixel. Output row
    /// `oy·Wo + ox`, column `(ky·3 + kx)·C + c`.
    pub(crate) fn im2col(&mut self, src: Var, height: usize, width: usize, stride: usize) -> Var {
        let input = self.value(src);
        let channels = input.ncols();
        debug_assert_eq!(input.nrows(), height * width);
        let (oh, ow) = (conv_out(height, stride), conv_out(width, stride));
        let mut out = Array2::zeros((oh * ow, 9 * channels));
        for oy in 0..oh {
            for ox in 0..ow {
                let r = oy * ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let Some((y, x)) = tap(oy, ox, ky, kx, stride, height, width) else {
                            continue;
                        };
                        let col = (ky * 3 + kx) * channels;
                        out.slice_mut(s![r, col..col + channels])
                            .assign(&input.row(y * width + x));
                    }
                }
            }
        }
        self.push(out, Op::Im2Col { src, height, width, stride })
    }

    /// Nearest-neighbour 2× upsampling.
    pub(crate) fn upsample2x(&mut self, src: Var, height: usize, width: usize) -> Var {
        let input = self.value(src);
        let mut out = Array2::zeros((4 * height * width, input.ncols()));
        for y in 0..2 * height {
            for x in 0..2 * width {
                out.row_mut(y * 2 * width + x).assign(&input.row((y / 2) * width + x / 2));
            }
        }
        self.push(out, Op::Upsample2x { src, height, width })
    }

    pub(crate) fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols requires equal row counts");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub(crate) fn mse(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let diff = self.value(pred) - &target;
        let loss = diff.mapv(|d| d * d).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target })
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub(crate) fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Silu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gi, &x| {
                        let sg = sigmoid(x);
                        *gi *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        drow.zip_mut_with(&yrow, |di, &yi| *di -= yi * dot);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Im2Col { src, height, width, stride } => {
                    let channels = self.value(*src).ncols();
                    let (oh, ow) = (conv_out(*height, *stride), conv_out(*width, *stride));
                    let mut d = Array2::zeros((height * width, channels));
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let r = oy * ow + ox;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let Some((y, x)) =
                                        tap(oy, ox, ky, kx, *stride, *height, *width)
                                    else {
                                        continue;
                                    };
                                    let col = (ky * 3 + kx) * channels;
                                    let mut dst = d.row_mut(y * width + x);
                                    dst += &g.slice(s![r, col..col + channels]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::Upsample2x { src, height, width } => {
                    let mut d = Array2::zeros((height * width, g.ncols()));
                    for y in 0..2 * height {
                        for x in 0..2 * width {
                            let mut dst = d.row_mut((y / 2) * width + x / 2);
                            dst += &g.row(y * 2 * width + x);
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.len() as f64;
                    let k = 2.0 * g[[0, 0]] / n;
                    let d = (p - target) * k;
                    accumulate(&mut grads, *pred, d);
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the root does not depend on it.
    pub(crate) fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

fn tap(
    oy: usize,
    ox: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    height: usize,
    width: usize,
) -> Option<(usize, usize)> {
    let y = (oy * stride + ky).checked_sub(1)?;
    let x = (ox * stride + kx).checked_sub(1)?;
    (y < height && x < width).then_some((y, x))
}
