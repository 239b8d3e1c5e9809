//! Integer-only execution of a [`QGraph`] on one image. Accumulators are 32
//! bit and every addition is checked; requantization rounds half to even.

use super::csd::CsdCode;
use super::fixed::{div_round_half_even, requantize, saturate, QuantParams};
use super::qgraph::{ConvKind, QGraph, QOp, QTensor, BLEND_EXPONENT};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::topology::TensorShape;

#[derive(Clone, Copy)]
enum Cell {
    Zero,
    Mul(i32),
    Scaler(CsdCode),
}

impl Cell {
    #[inline]
    fn apply(self, x: i32) -> i32 {
        match self {
            Cell::Zero => 0,
            Cell::Mul(w) => w * x,
            Cell::Scaler(c) => c.apply(x),
        }
    }
}

fn cells(weights: &super::qgraph::QConvWeights) -> Vec<Cell> {
    let mut out = vec![Cell::Zero; weights.numel()];
    for (i, c) in &weights.frozen {
        out[*i as usize] = Cell::Scaler(*c);
    }
    for (i, q) in &weights.trainable {
        if *q != 0 {
            out[*i as usize] = Cell::Mul(*q as i32);
        }
    }
    out
}

#[derive(Clone)]
struct Fmap {
    shape: TensorShape,
    data: Vec<i8>,
}

impl Fmap {
    fn plane(&self, c: usize) -> &[i8] {
        let p = self.shape.pixels();
        &self.data[c * p..(c + 1) * p]
    }
}

struct Ctx<'a> {
    layer: &'a str,
}

impl Ctx<'_> {
    fn overflow(&self) -> Error {
        Error::AccumulatorOverflow {
            layer: self.layer.to_string(),
        }
    }

    #[inline]
    fn add(&self, acc: i32, v: i32) -> Result<i32> {
        acc.checked_add(v).ok_or_else(|| self.overflow())
    }

    fn narrow(&self, v: i64) -> Result<i32> {
        i32::try_from(v).map_err(|_| self.overflow())
    }
}

/// Pad-1 3x3 window accumulation of one input plane into one output plane.
#[allow(clippy::too_many_arguments)]
fn window_accumulate(
    ctx: &Ctx,
    x: &[i8],
    (h, w): (usize, usize),
    k: &[Cell],
    stride: usize,
    acc: &mut [i32],
    (oh, ow): (usize, usize),
) -> Result<()> {
    for oy in 0..oh {
        for ox in 0..ow {
            let mut a = acc[oy * ow + ox];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let cell = k[ky * 3 + kx];
                    if let Cell::Zero = cell {
                        continue;
                    }
                    a = ctx.add(a, cell.apply(x[iy as usize * w + ix as usize] as i32))?;
                }
            }
            acc[oy * ow + ox] = a;
        }
    }
    Ok(())
}

fn requant_plane(src: &[i8], from: i32, to: i32) -> Vec<i8> {
    if from == to {
        return src.to_vec();
    }
    src.iter().map(|&q| requantize(q as i64, from, to)).collect()
}

pub fn quantize_input(qg: &QGraph, batch: &Tensor, index: usize) -> QTensor {
    QTensor::from_tensor(batch, index, qg.input_params())
}

fn live_layers(qg: &QGraph, slots: usize) -> Vec<bool> {
    let mut need = vec![false; slots];
    let mut live = vec![false; qg.layers.len()];
    need[qg.output] = true;
    for (i, layer) in qg.layers.iter().enumerate().rev() {
        if !layer.op.outputs().iter().any(|&s| need[s]) {
            continue;
        }
        live[i] = true;
        match &layer.op {
            QOp::Select { sources, .. } => need[sources[qg.binding.head.index()]] = true,
            QOp::CrossShuffle {
                a, b, out_a, out_b, ..
            } if !qg.binding.joint => {
                need[*a] |= need[*out_a];
                need[*b] |= need[*out_b];
            }
            op => {
                for s in op.inputs() {
                    need[s] = true;
                }
            }
        }
    }
    live
}

pub fn quantized_forward(qg: &QGraph, input: &QTensor) -> Result<QTensor> {
    let in_exp = qg.input_params().exponent;
    if input.params.exponent != in_exp {
        return Err(Error::ExponentMismatch {
            expected: in_exp,
            found: input.params.exponent,
        });
    }
    if input.data.len() != input.shape.numel() {
        return Err(Error::ShapeMismatch("input data does not match its shape".into()));
    }
    let nslots = qg.exponents.len();
    let live = live_layers(qg, nslots);
    let mut slots: Vec<Option<Fmap>> = vec![None; nslots];
    slots[qg.input] = Some(Fmap {
        shape: input.shape,
        data: input.data.clone(),
    });
    let e = |s: usize| -> Result<i32> {
        qg.exponents[s].ok_or_else(|| Error::Unquantizable(format!("slot {s} has no exponent")))
    };
    let get = |slots: &[Option<Fmap>], s: usize| -> Result<Fmap> {
        slots[s]
            .clone()
            .ok_or_else(|| Error::ShapeMismatch(format!("slot {s} read before it was written")))
    };

    for (li, layer) in qg.layers.iter().enumerate() {
        if !live[li] {
            continue;
        }
        let ctx = Ctx { layer: &layer.name };
        match &layer.op {
            QOp::Conv {
                kind,
                input,
                output,
                weights,
                bn,
                bias,
            } => {
                let x = get(&slots, *input)?;
                let cell = cells(weights);
                let cout = weights.shape[0];
                let (stride, cin) = match kind {
                    ConvKind::Full { stride } | ConvKind::Depthwise { stride } => (*stride, x.shape.channels),
                    ConvKind::Pointwise { .. } => (1, x.shape.channels),
                };
                let out_shape = x.shape.strided(cout, stride);
                let (oh, ow) = (out_shape.height, out_shape.width);
                let hw = oh * ow;
                let mut acc = vec![0i32; cout * hw];
                match kind {
                    ConvKind::Full { .. } => {
                        for o in 0..cout {
                            for i in 0..cin {
                                let k = &cell[(o * cin + i) * 9..(o * cin + i + 1) * 9];
                                window_accumulate(
                                    &ctx,
                                    x.plane(i),
                                    (x.shape.height, x.shape.width),
                                    k,
                                    stride,
                                    &mut acc[o * hw..(o + 1) * hw],
                                    (oh, ow),
                                )?;
                            }
                        }
                    }
                    ConvKind::Depthwise { .. } => {
                        for c in 0..cout {
                            window_accumulate(
                                &ctx,
                                x.plane(c),
                                (x.shape.height, x.shape.width),
                                &cell[c * 9..c * 9 + 9],
                                stride,
                                &mut acc[c * hw..(c + 1) * hw],
                                (oh, ow),
                            )?;
                        }
                    }
                    ConvKind::Pointwise { groups } => {
                        let gin = cin / groups;
                        let gout = cout / groups;
                        for o in 0..cout {
                            let g = o / gout;
                            let out = &mut acc[o * hw..(o + 1) * hw];
                            for j in 0..gin {
                                let cw = cell[o * gin + j];
                                if let Cell::Zero = cw {
                                    continue;
                                }
                                for (a, &v) in out.iter_mut().zip(x.plane(g * gin + j)) {
                                    *a = ctx.add(*a, cw.apply(v as i32))?;
                                }
                            }
                        }
                    }
                }
                let acc_exp = weights.exponent + e(*input)?;
                let eo = e(*output)?;
                let mut data = vec![0i8; cout * hw];
                for o in 0..cout {
                    for p in 0..hw {
                        let a = acc[o * hw + p];
                        data[o * hw + p] = if let Some(bn) = bn {
                            let v = ctx.narrow(bn.scale[o] as i64 * a as i64 + bn.shift[o] as i64)?;
                            requantize(v as i64, acc_exp + bn.scale_exponent[o], eo)
                        } else if let Some(b) = bias {
                            requantize(ctx.add(a, b[o])? as i64, acc_exp, eo)
                        } else {
                            requantize(a as i64, acc_exp, eo)
                        };
                    }
                }
                slots[*output] = Some(Fmap {
                    shape: out_shape,
                    data,
                });
            }
            QOp::Relu { input, output } => {
                let x = get(&slots, *input)?;
                let relu: Vec<i8> = x.data.iter().map(|&q| q.max(0)).collect();
                slots[*output] = Some(Fmap {
                    shape: x.shape,
                    data: requant_plane(&relu, e(*input)?, e(*output)?),
                });
            }
            QOp::Split {
                input,
                first,
                second,
            } => {
                let x = get(&slots, *input)?;
                let half = x.shape.channels / 2;
                let p = x.shape.pixels();
                let shape = TensorShape::new(half, x.shape.height, x.shape.width);
                let ei = e(*input)?;
                slots[*first] = Some(Fmap {
                    shape,
                    data: requant_plane(&x.data[..half * p], ei, e(*first)?),
                });
                slots[*second] = Some(Fmap {
                    shape,
                    data: requant_plane(&x.data[half * p..], ei, e(*second)?),
                });
            }
            QOp::Concat {
                first,
                second,
                output,
            } => {
                let (a, b) = (get(&slots, *first)?, get(&slots, *second)?);
                let eo = e(*output)?;
                let mut data = requant_plane(&a.data, e(*first)?, eo);
                data.extend(requant_plane(&b.data, e(*second)?, eo));
                slots[*output] = Some(Fmap {
                    shape: TensorShape::new(a.shape.channels + b.shape.channels, a.shape.height, a.shape.width),
                    data,
                });
            }
            QOp::Shuffle {
                input,
                output,
                groups,
            } => {
                let x = get(&slots, *input)?;
                let (c, p) = (x.shape.channels, x.shape.pixels());
                let per = c / groups;
                let mut data = vec![0i8; x.data.len()];
                for k in 0..per {
                    for j in 0..*groups {
                        data[(k * groups + j) * p..(k * groups + j + 1) * p].copy_from_slice(x.plane(j * per + k));
                    }
                }
                slots[*output] = Some(Fmap {
                    shape: x.shape,
                    data: requant_plane(&data, e(*input)?, e(*output)?),
                });
            }
            QOp::Blend {
                frozen,
                trainable,
                output,
                alpha,
                complement,
            } => {
                let (xf, xt) = (get(&slots, *frozen)?, get(&slots, *trainable)?);
                if xf.shape != xt.shape {
                    return Err(Error::ShapeMismatch(format!("{}: blend inputs differ", layer.name)));
                }
                let (ef, et, eo) = (e(*frozen)?, e(*trainable)?, e(*output)?);
                let common = ef.min(et);
                let (sf, st) = (1i64 << (ef - common).min(40), 1i64 << (et - common).min(40));
                let p = xf.shape.pixels();
                let mut data = vec![0i8; xf.data.len()];
                for c in 0..xf.shape.channels {
                    let (a, b) = (alpha[c] as i64, complement[c] as i64);
                    for k in c * p..(c + 1) * p {
                        let v = a * xf.data[k] as i64 * sf + b * xt.data[k] as i64 * st;
                        data[k] = requantize(ctx.narrow(v)? as i64, common + BLEND_EXPONENT, eo);
                    }
                }
                slots[*output] = Some(Fmap {
                    shape: xf.shape,
                    data,
                });
            }
            QOp::CrossShuffle { a, b, out_a, out_b } => {
                if qg.binding.joint {
                    let (xa, xb) = (get(&slots, *a)?, get(&slots, *b)?);
                    let (ea, eb) = (e(*a)?, e(*b)?);
                    let half = xa.shape.channels / 2 * xa.shape.pixels();
                    let (eoa, eob) = (e(*out_a)?, e(*out_b)?);
                    let mut da = requant_plane(&xa.data[..half], ea, eoa);
                    da.extend(requant_plane(&xb.data[half..], eb, eoa));
                    let mut db = requant_plane(&xb.data[..half], eb, eob);
                    db.extend(requant_plane(&xa.data[half..], ea, eob));
                    slots[*out_a] = Some(Fmap {
                        shape: xa.shape,
                        data: da,
                    });
                    slots[*out_b] = Some(Fmap {
                        shape: xb.shape,
                        data: db,
                    });
                } else {
                    // independent cores: each side passes through if it was computed
                    for (src, dst) in [(*a, *out_a), (*b, *out_b)] {
                        if let Some(x) = slots[src].clone() {
                            slots[dst] = Some(Fmap {
                                shape: x.shape,
                                data: requant_plane(&x.data, e(src)?, e(dst)?),
                            });
                        }
                    }
                }
            }
            QOp::Select { sources, output } => {
                let src = sources[qg.binding.head.index()];
                let x = get(&slots, src)?;
                slots[*output] = Some(Fmap {
                    shape: x.shape,
                    data: requant_plane(&x.data, e(src)?, e(*output)?),
                });
            }
            QOp::GlobalAvgPool { input, output } => {
                let x = get(&slots, *input)?;
                let (ei, eo) = (e(*input)?, e(*output)?);
                let p = x.shape.pixels() as i64;
                let mut data = Vec::with_capacity(x.shape.channels);
                for c in 0..x.shape.channels {
                    let mut sum = 0i32;
                    for &q in x.plane(c) {
                        sum = ctx.add(sum, q as i32)?;
                    }
                    // mean * 2^(ei - eo), exact rational then one rounding
                    let v = if ei >= eo {
                        let num = (sum as i64)
                            .checked_mul(1i64 << (ei - eo).min(40))
                            .ok_or_else(|| ctx.overflow())?;
                        div_round_half_even(num, p)
                    } else {
                        div_round_half_even(sum as i64, p << (eo - ei).min(40))
                    };
                    data.push(saturate(v));
                }
                slots[*output] = Some(Fmap {
                    shape: TensorShape::new(x.shape.channels, 1, 1),
                    data,
                });
            }
            QOp::Lookup {
                input,
                output,
                table,
            } => {
                let x = get(&slots, *input)?;
                slots[*output] = Some(Fmap {
                    shape: x.shape,
                    data: x.data.iter().map(|&q| table[(q as i32 + 127) as usize]).collect(),
                });
            }
        }
    }
    let out = get(&slots, qg.output)?;
    Ok(QTensor {
        shape: out.shape,
        data: out.data,
        params: QuantParams::new(e(qg.output)?),
    })
}

/// Run every item of a float batch through the integer network.
pub fn quantized_predict(qg: &QGraph, batch: &Tensor) -> Result<Vec<QTensor>> {
    (0..batch.n)
        .map(|i| quantized_forward(qg, &quantize_input(qg, batch, i)))
        .collect()
}
