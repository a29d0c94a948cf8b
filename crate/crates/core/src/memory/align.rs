//! Pyramid alignment: recurrence at the coarsest pyramid level, decoded back to full
//! resolution with skip connections from the current feature pyramid.

use crate::error::{Error, Result};
use crate::memory::stmm::{stmm_step, GateKind};
use crate::nnkit::{Bound, OpGraph, Real, Tape, Var};

/// Spatial dims of every pyramid level: level 0 is `(h, w)`, each next level ceil-halves.
pub fn pyramid_dims(h: usize, w: usize, levels: usize) -> Result<Vec<(usize, usize)>> {
    if levels == 0 {
        return Err(Error::contract("pyramid needs at least one level"));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("pyramid input has an empty spatial extent"));
    }
    let mut dims = vec![(h, w)];
    for _ in 1..levels {
        let (ph, pw) = *dims.last().expect("non-empty");
        if ph < 2 && pw < 2 {
            return Err(Error::contract(format!(
                "{h}x{w} input is too small for a {levels}-level pyramid"
            )));
        }
        dims.push((ph.div_ceil(2), pw.div_ceil(2)));
    }
    Ok(dims)
}

/// Level 0 is `x`, level `l` is the 2x2 max pool of level `l - 1`.
pub fn build_pyramid<T: Real>(tape: &mut Tape<T>, x: Var, levels: usize) -> Result<Vec<Var>> {
    let (h, w) = tape.value(x).hw();
    pyramid_dims(h, w, levels)?;
    let mut out = vec![x];
    for _ in 1..levels {
        let next = tape.maxpool2x2(*out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(out)
}

/// Decoder conv name for the step that produces pyramid level `level`.
pub fn decoder_name(level: usize) -> String {
    format!("dec{level}")
}

/// Climbs from the coarsest level to level 0. Per step: bilinear 2x upsampling, pad or crop by
/// at most one row/column to the skip's dims, channel concatenation `[up, skip]`, 3x3 conv back
/// to C channels, ReLU.
pub fn decode_upsample<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    coarse: Var,
    skips: &[Var],
) -> Result<Var> {
    let Some(&top) = skips.last() else {
        return Err(Error::contract("decoder needs at least one skip level"));
    };
    if tape.value(coarse).shape() != tape.value(top).shape() {
        return Err(Error::contract(format!(
            "coarse map {:?} does not match the coarsest skip {:?}",
            tape.value(coarse).shape(),
            tape.value(top).shape()
        )));
    }
    let mut x = coarse;
    for level in (0..skips.len() - 1).rev() {
        let skip = skips[level];
        let (sh, sw) = tape.value(skip).hw();
        let up = tape.upsample2x(x);
        let (uh, uw) = tape.value(up).hw();
        if uh.abs_diff(sh) > 1 || uw.abs_diff(sw) > 1 {
            return Err(Error::contract(format!(
                "cannot match upsampled {uh}x{uw} to skip {sh}x{sw} with a one-cell pad or crop"
            )));
        }
        let up = tape.pad_or_crop(up, sh, sw);
        let cat = tape.concat(up, skip)?;
        let name = decoder_name(level);
        let w = p.var(&format!("{prefix}{name}.w"))?;
        let b = p.var(&format!("{prefix}{name}.b"))?;
        let y = tape.conv2d(cat, w, Some(b), 1, 1)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// Pyramids of both inputs, gated update at the coarsest level only, decoder back to full
/// resolution. With one level this is exactly [`stmm_step`].
pub fn learned_align_step<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    m_prev: Var,
    f_t: Var,
    levels: usize,
    gate_kind: GateKind,
) -> Result<Var> {
    if tape.value(m_prev).shape() != tape.value(f_t).shape() {
        return Err(Error::contract("memory and feature must have identical shapes"));
    }
    let mp = build_pyramid(tape, m_prev, levels)?;
    let fp = build_pyramid(tape, f_t, levels)?;
    let top = levels - 1;
    let coarse = stmm_step(tape, p, prefix, mp[top], fp[top], gate_kind)?.memory;
    decode_upsample(tape, p, prefix, coarse, &fp)
}

/// Parameters added by the decoder relative to a one-level cell, and the multiplier on the
/// receptive-field growth of the recurrent 3x3 convolution.
///
/// The growth is measured with [`OpGraph::receptive_field`] on `(L-1)` poolings followed by the
/// recurrent conv, relative to the conv alone.
pub fn cell_param_delta(channels: usize, levels: usize) -> Result<(usize, usize)> {
    if channels == 0 || levels == 0 {
        return Err(Error::contract("channels and levels must be at least 1"));
    }
    let mut decoder = OpGraph::new();
    for _ in 1..levels {
        decoder = decoder.conv(3, 1, 2 * channels, channels);
    }
    let recurrent = |l: usize| {
        let mut g = OpGraph::new();
        for _ in 1..l {
            g = g.pool();
        }
        g.conv(3, 1, channels, channels).receptive_field().receptive_field - 1
    };
    Ok((decoder.count_parameters(), recurrent(levels) / recurrent(1)))
}
