//! Row kernels of the channel encoding: `s = softmax_p(q[p]·k[c])`,
//! response `s ⊙ v`, pooled over `p`.

use super::{Pool, Scalar};

pub(crate) struct RowScratch<T> {
    colmax: Vec<T>,
    den: Vec<T>,
    db: Vec<T>,
    ds: Vec<T>,
    dot: Vec<T>,
}

impl<T: Scalar> RowScratch<T> {
    pub(crate) fn new(p: usize, c: usize) -> Self {
        Self {
            colmax: vec![T::zero(); c],
            den: vec![T::zero(); c],
            db: vec![T::zero(); p * c],
            ds: vec![T::zero(); p * c],
            dot: vec![T::zero(); c],
        }
    }
}

/// Dot product accumulated in eight interleaved lanes.
#[inline(always)]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &x| s + x)
}

/// Writes the attention `softmax_p(q[p]·k[c])` of one row into `s`
/// (`[P, C]`).
pub(crate) fn attention_row<T: Scalar>(qr: &[T], kr: &[T], s: &mut [T], scratch: &mut RowScratch<T>) {
    let c = kr.len();
    let colmax = &mut scratch.colmax;
    let den = &mut scratch.den;
    for (m, &kv) in colmax.iter_mut().zip(kr) {
        *m = qr[0] * kv;
    }
    for &qv in &qr[1..] {
        for (m, &kv) in colmax.iter_mut().zip(kr) {
            let a = qv * kv;
            *m = if a > *m { a } else { *m };
        }
    }
    den.iter_mut().for_each(|d| *d = T::zero());
    for (srow, &qv) in s.chunks_exact_mut(c).zip(qr) {
        for (((sv, &kv), &m), d) in srow.iter_mut().zip(kr).zip(colmax.iter()).zip(den.iter_mut()) {
            let e = (qv * kv - m).exp_fast();
            *sv = e;
            *d = *d + e;
        }
    }
    den.iter_mut().for_each(|d| *d = T::one() / *d);
    for srow in s.chunks_exact_mut(c) {
        for (sv, &d) in srow.iter_mut().zip(den.iter()) {
            *sv = *sv * d;
        }
    }
}

/// Pools the response `s ⊙ v` of one row over `p`. Max ties go to the
/// lowest `p`.
pub(crate) fn pool_row<T: Scalar>(s: &[T], vr: &[T], pool: Pool, out: &mut [T], argmax: Option<&mut [u8]>) {
    let c = out.len();
    let p = s.len() / c;
    match pool {
        Pool::Max => {
            for ((o, &sv), &vv) in out.iter_mut().zip(&s[..c]).zip(&vr[..c]) {
                *o = sv * vv;
            }
            match argmax {
                Some(arg) => {
                    arg.iter_mut().for_each(|a| *a = 0);
                    for pi in 1..p {
                        let (srow, vrow) = (&s[pi * c..(pi + 1) * c], &vr[pi * c..(pi + 1) * c]);
                        for (((o, a), &sv), &vv) in out.iter_mut().zip(arg.iter_mut()).zip(srow).zip(vrow) {
                            let b = sv * vv;
                            let better = b > *o;
                            *o = if better { b } else { *o };
                            *a = if better { pi as u8 } else { *a };
                        }
                    }
                }
                None => {
                    for pi in 1..p {
                        let (srow, vrow) = (&s[pi * c..(pi + 1) * c], &vr[pi * c..(pi + 1) * c]);
                        for ((o, &sv), &vv) in out.iter_mut().zip(srow).zip(vrow) {
                            let b = sv * vv;
                            *o = if b > *o { b } else { *o };
                        }
                    }
                }
            }
        }
        Pool::Mean | Pool::Sum => {
            out.iter_mut().for_each(|o| *o = T::zero());
            for (srow, vrow) in s.chunks_exact(c).zip(vr.chunks_exact(c)) {
                for ((o, &sv), &vv) in out.iter_mut().zip(srow).zip(vrow) {
                    *o = *o + sv * vv;
                }
            }
            if pool == Pool::Mean {
                let n = T::from_usize(p).unwrap();
                out.iter_mut().for_each(|o| *o = *o / n);
            }
        }
    }
}

/// Attention and pooled response of one row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_row<T: Scalar>(
    qr: &[T],
    kr: &[T],
    vr: &[T],
    pool: Pool,
    s: &mut [T],
    out: &mut [T],
    argmax: Option<&mut [u8]>,
    scratch: &mut RowScratch<T>,
) {
    attention_row(qr, kr, s, scratch);
    pool_row(s, vr, pool, out, argmax);
}

/// Row gradients given the attention `s` from `encode_row`. `dq` and `dv`
/// are overwritten, `dk` is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_row_backward<T: Scalar>(
    qr: &[T],
    kr: &[T],
    vr: &[T],
    s: &[T],
    gr: &[T],
    argmax: &[u8],
    pool: Pool,
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
    scratch: &mut RowScratch<T>,
) {
    let c = kr.len();
    let p = qr.len();
    let db = &mut scratch.db;
    match pool {
        Pool::Max => {
            db.iter_mut().for_each(|x| *x = T::zero());
            for j in 0..c {
                db[argmax[j] as usize * c + j] = gr[j];
            }
        }
        Pool::Mean | Pool::Sum => {
            let f = if pool == Pool::Mean {
                T::one() / T::from_usize(p).unwrap()
            } else {
                T::one()
            };
            for brow in db.chunks_exact_mut(c) {
                for (b, &gv) in brow.iter_mut().zip(gr) {
                    *b = gv * f;
                }
            }
        }
    }
    if let Some(dv) = dv {
        for ((d, &b), &sv) in dv.iter_mut().zip(db.iter()).zip(s) {
            *d = b * sv;
        }
    }
    if dq.is_none() && dk.is_none() {
        return;
    }
    let ds = &mut scratch.ds;
    let dot = &mut scratch.dot;
    dot.iter_mut().for_each(|x| *x = T::zero());
    for (((dsrow, dbrow), vrow), srow) in ds
        .chunks_exact_mut(c)
        .zip(db.chunks_exact(c))
        .zip(vr.chunks_exact(c))
        .zip(s.chunks_exact(c))
    {
        for ((((d, &b), &v), &sv), dt) in dsrow.iter_mut().zip(dbrow).zip(vrow).zip(srow).zip(dot.iter_mut()) {
            let x = b * v;
            *d = x;
            *dt = *dt + sv * x;
        }
    }
    for (dsrow, srow) in ds.chunks_exact_mut(c).zip(s.chunks_exact(c)) {
        for ((d, &sv), &dt) in dsrow.iter_mut().zip(srow).zip(dot.iter()) {
            *d = sv * (*d - dt);
        }
    }
    if let Some(dq) = dq {
        for (d, dsrow) in dq.iter_mut().zip(ds.chunks_exact(c)) {
            *d = lane_dot(dsrow, kr);
        }
    }
    if let Some(dk) = dk {
        for (pi, &qv) in qr.iter().enumerate() {
            for (a, &b) in dk.iter_mut().zip(&ds[pi * c..(pi + 1) * c]) {
                *a = *a + b * qv;
            }
        }
    }
}
