//! Binary PGM (P5) / PPM (P6) reading and writing, plus bilinear resampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `[3,h,w]` tensor of values in [0,1] as a binary PPM with
/// maxval 255. Values quantize by rounding.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let sh = image.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::contract(
            "write_ppm",
            format!("expected [3,h,w] image, got {:?}", sh),
        ));
    }
    let (h, w) = (sh[1], sh[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let data = image.data();
    for pos in 0..hw {
        for c in 0..3 {
            buf.push(quantize(data[c * hw + pos]));
        }
    }
    write_atomic(path, &buf)
}

/// Writes raw bytes as a binary PGM with maxval 255.
pub fn write_pgm_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != w * h {
        return Err(Error::contract(
            "write_pgm",
            format!("{w}x{h} image needs {} bytes, got {}", w * h, bytes.len()),
        ));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(bytes);
    write_atomic(path, &buf)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn write_atomic(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a binary PGM or PPM into a `[3,h,w]` tensor scaled to [0,1].
/// Grayscale input is replicated across the three channels.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let raw = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let fmt_err = |msg: &str| Error::Format { path: name.clone(), msg: msg.to_string() };

    let mut cursor = 0usize;
    let magic = read_token(&raw, &mut cursor).ok_or_else(|| fmt_err("missing magic number"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(fmt_err(&format!("unsupported magic {other:?}"))),
    };
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        let tok = read_token(&raw, &mut cursor).ok_or_else(|| fmt_err("truncated header"))?;
        *slot = tok.parse().map_err(|_| fmt_err(&format!("bad header token {tok:?}")))?;
    }
    let (w, h, maxval) = (header[0], header[1], header[2]);
    if w == 0 || h == 0 {
        return Err(fmt_err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(&format!("unsupported maxval {maxval}")));
    }
    let payload = &raw[cursor..];
    let need = w * h * channels;
    if payload.len() < need {
        return Err(fmt_err(&format!("expected {need} sample bytes, found {}", payload.len())));
    }

    let hw = h * w;
    let scale = 1.0 / maxval as f64;
    let mut data = vec![0.0; 3 * hw];
    for pos in 0..hw {
        for c in 0..3 {
            let byte = payload[pos * channels + c.min(channels - 1)];
            data[c * hw + pos] = byte as f64 * scale;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Advances past whitespace and `#` comments, then collects one token.
/// Leaves the cursor one byte past the whitespace terminating the token.
fn read_token(raw: &[u8], cursor: &mut usize) -> Option<String> {
    let mut i = *cursor;
    loop {
        while i < raw.len() && raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < raw.len() && raw[i] == b'#' {
            while i < raw.len() && raw[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    let start = i;
    while i < raw.len() && !raw[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return None;
    }
    let tok = String::from_utf8_lossy(&raw[start..i]).into_owned();
    *cursor = (i + 1).min(raw.len());
    Some(tok)
}

/// Bilinear resize of a `[c,h,w]` tensor with corner alignment, so equal
/// input and output sizes copy exactly.
pub fn resize_bilinear(image: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let sh = image.shape();
    if sh.len() != 3 {
        return Err(Error::contract(
            "resize_bilinear",
            format!("expected [c,h,w] image, got {:?}", sh),
        ));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if oh == 0 || ow == 0 {
        return Err(Error::contract("resize_bilinear", "output dims must be positive"));
    }
    let ry = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let rx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    let mut out = vec![0.0; c * oh * ow];
    let data = image.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let sy = oy as f64 * ry;
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = ox as f64 * rx;
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v00 = data[base + y0 * w + x0];
                let v01 = data[base + y0 * w + x1];
                let v10 = data[base + y1 * w + x0];
                let v11 = data[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[(ch * oh + oy) * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out)
}

/// Upsamples an `h×w` scalar map by an integer factor. Output pixel (J, I)
/// interpolates the source at (J/f, I/f), so positions that are exact
/// multiples of the factor reproduce source values bitwise.
pub fn upsample_by_factor(values: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    assert!(factor >= 1 && values.len() == h * w, "map dims must match");
    let (oh, ow) = (h * factor, w * factor);
    let f = factor as f64;
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = oy as f64 / f;
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ox as f64 / f;
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = values[y0 * w + x0] + (values[y0 * w + x1] - values[y0 * w + x0]) * fx;
            let bot = values[y1 * w + x0] + (values[y1 * w + x1] - values[y1 * w + x0]) * fx;
            out[oy * ow + ox] = top + (bot - top) * fy;
        }
    }
    out
}
