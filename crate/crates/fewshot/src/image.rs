//! Image decoding: binary PPM (P6, maxval 255) and CTMT tensor files.

use ctm_core::io::decode_tensor_exact;
use ctm_core::Tensor;

use crate::error::{Error, Result};

/// Decodes to a `(3, H, W)` tensor with values in `[0, 1]`, RGB order.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(ctm_core::io::MAGIC) {
        let t = decode_tensor_exact(bytes)?.cast::<f32>();
        match t.shape() {
            [3, _, _] => Ok(t),
            s => Err(Error::Decode(format!("CTMT image must have shape (3, H, W), got {s:?}"))),
        }
    } else {
        Err(Error::Decode("bad magic: expected P6 or CTMT".into()))
    }
}

/// Skips whitespace and `#` comments, then reads one ASCII decimal token.
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::Decode("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Decode("malformed PPM header field".into()))
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 2;
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Decode(format!("unsupported PPM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Decode("empty PPM image".into()));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("missing separator after PPM header".into()));
    }
    pos += 1;
    let plane = width * height;
    let pixels = bytes.get(pos..pos + 3 * plane).ok_or_else(|| Error::Decode("truncated PPM payload".into()))?;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new([3, height, width], data)?)
}

/// Encodes a `(3, H, W)` tensor in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Decode(format!("PPM needs a (3, H, W) tensor, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
