//! Magnitude-proportional stochastic pooling (Zeiler & Fergus). Inside each
//! window a value is drawn with probability `v / sum(window)`; inference uses
//! the probability-weighted average `sum(v^2) / sum(v)`.

use crate::error::{Error, Result};
use crate::sampling::RngStream;
use crate::tensor::{Dims, Tensor4};

use super::{check_window, strided_dims, window, Mode};

#[derive(Clone, Debug)]
pub struct ZeilerTape {
    input: Dims,
    output: Dims,
    selected: Vec<usize>,
}

impl ZeilerTape {
    /// Buffer offsets into the input of each selected activation.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }
}

pub fn zeiler_stochastic_pool(
    x: &Tensor4,
    k: usize,
    s: usize,
    rng: &RngStream,
    mode: Mode,
) -> Result<(Tensor4, Option<ZeilerTape>)> {
    check_window(k)?;
    let d = x.dims();
    let out_dims = strided_dims(d, s)?;
    if let Some(&v) = x.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::NegativeActivation(v));
    }
    let (h, w) = (d.h(), d.w());
    let mut out = Vec::with_capacity(out_dims.len());
    let mut selected = Vec::with_capacity(out_dims.len());
    let mut cells: Vec<usize> = Vec::with_capacity(k * k);
    for n in 0..d.n() {
        let mut lane = rng.lane(n as u64);
        for c in 0..d.c() {
            let base = (n * d.c() + c) * d.plane();
            let plane = x.plane(n, c);
            for i in 0..out_dims.h() {
                let rows = window(i * s, k, h);
                for j in 0..out_dims.w() {
                    let cols = window(j * s, k, w);
                    cells.clear();
                    for y in rows.clone() {
                        cells.extend(cols.clone().map(|xx| y * w + xx));
                    }
                    let total: f64 = cells.iter().map(|&at| plane[at]).sum();
                    match mode {
                        Mode::Infer => {
                            let v = if total > 0.0 {
                                cells.iter().map(|&at| plane[at] * plane[at]).sum::<f64>() / total
                            } else {
                                0.0
                            };
                            out.push(v);
                        }
                        Mode::Train => {
                            let pick = if total > 0.0 {
                                let target = lane.next_f64() * total;
                                let mut acc = 0.0;
                                // Fall back to the last positive cell if rounding
                                // leaves the target past the cumulative sum.
                                let mut chosen = *cells.iter().rev().find(|&&at| plane[at] > 0.0).unwrap();
                                for &at in &cells {
                                    acc += plane[at];
                                    if target < acc {
                                        chosen = at;
                                        break;
                                    }
                                }
                                chosen
                            } else {
                                cells[lane.below(cells.len() as u64) as usize]
                            };
                            out.push(plane[pick]);
                            selected.push(base + pick);
                        }
                    }
                }
            }
        }
    }
    let z = Tensor4::from_vec(out_dims, out)?;
    let tape = (mode == Mode::Train).then_some(ZeilerTape {
        input: d,
        output: out_dims,
        selected,
    });
    Ok((z, tape))
}

pub fn zeiler_backward(grad: &Tensor4, tape: Option<&ZeilerTape>) -> Result<Tensor4> {
    let tape = tape.ok_or(Error::MissingTape)?;
    if grad.dims() != tape.output {
        return Err(Error::ShapeMismatch {
            expected: tape.output,
            found: grad.dims(),
        });
    }
    let mut gx = Tensor4::zeros(tape.input);
    let buf = gx.data_mut();
    for (&at, &g) in tape.selected.iter().zip(grad.data()) {
        buf[at] += g;
    }
    Ok(gx)
}
