//! Binary (P5) PGM reading and writing, 8- and 16-bit.

use std::io::{self, Read, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub data: Vec<u16>,
}

pub fn write_pgm<W: Write>(mut w: W, img: &Pgm) -> io::Result<()> {
    write!(w, "P5\n{} {}\n{}\n", img.width, img.height, img.maxval)?;
    if img.maxval < 256 {
        let bytes: Vec<u8> = img.data.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
    } else {
        let mut bytes = Vec::with_capacity(img.data.len() * 2);
        for v in &img.data {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_pgm<R: Read>(mut r: R) -> io::Result<Pgm> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(invalid(format!("unsupported PGM magic `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| invalid(format!("bad PGM header field `{s}`")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(invalid(format!("bad PGM maxval {maxval}")));
    }
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or_default();
    let data: Vec<u16> = if maxval < 256 {
        if raster.len() != n {
            return Err(invalid(format!("PGM raster has {} bytes, expected {n}", raster.len())));
        }
        raster.iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() != 2 * n {
            return Err(invalid(format!("PGM raster has {} bytes, expected {}", raster.len(), 2 * n)));
        }
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm { width, height, maxval: maxval as u16, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_depths() {
        for maxval in [255u16, 65535] {
            let img = Pgm { width: 3, height: 2, maxval, data: vec![0, 1, 2, 3, 4, maxval] };
            let mut buf = Vec::new();
            write_pgm(&mut buf, &img).unwrap();
            assert_eq!(read_pgm(&buf[..]).unwrap(), img);
        }
    }

    #[test]
    fn rejects_truncated_raster() {
        let err = read_pgm(&b"P5\n2 2\n255\n\x00\x01"[..]).unwrap_err();
        assert!(err.to_string().contains("raster"));
    }

    #[test]
    fn skips_comments() {
        let img = read_pgm(&b"P5\n# made by hand\n1 1\n255\n\x07"[..]).unwrap();
        assert_eq!(img.data, vec![7]);
    }
}
