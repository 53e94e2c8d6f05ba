//! Minimal Netpbm / PFM writers for rendered views and heatmaps.

use std::io::{self, Write};

/// Binary PPM (`P6`), 8 bits per channel, rows top to bottom.
pub fn write_ppm(w: &mut impl Write, width: u32, height: u32, rgb: &[[u8; 3]]) -> io::Result<()> {
    assert_eq!(rgb.len(), (width * height) as usize);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    w.write_all(&flat)
}

/// Binary PGM (`P5`) with 8-bit samples.
pub fn write_pgm8(w: &mut impl Write, width: u32, height: u32, gray: &[u8]) -> io::Result<()> {
    assert_eq!(gray.len(), (width * height) as usize);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)
}

/// Binary PGM (`P5`) with 16-bit big-endian samples.
pub fn write_pgm16(w: &mut impl Write, width: u32, height: u32, gray: &[u16]) -> io::Result<()> {
    assert_eq!(gray.len(), (width * height) as usize);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let flat: Vec<u8> = gray.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_all(&flat)
}

/// Greyscale PFM (`Pf`), little-endian (negative scale), rows bottom to top.
pub fn write_pfm(w: &mut impl Write, width: u32, height: u32, values: &[f32]) -> io::Result<()> {
    assert_eq!(values.len(), (width * height) as usize);
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    let mut flat = Vec::with_capacity(values.len() * 4);
    for row in values.chunks_exact(width as usize).rev() {
        for v in row {
            flat.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&flat)
}
