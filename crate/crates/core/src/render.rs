//! Deterministic rasterizer for factor assignments.
//!
//! Shapes are filled by inside tests on pixel centres with no anti-aliasing,
//! so identical inputs always give identical bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::puzzle::RpmInstance;
use crate::space::{FactorAssignment, FactorSpace, RenderRole};

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

/// Value used for the withheld panel in composite grids.
pub const BLANK: f32 = 0.0;
/// Value of the 1-pixel separators in composite grids.
pub const SEPARATOR: f32 = 0.5;

/// Row-major image, channels interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn set(&mut self, x: usize, y: usize, rgb: &[f32; 3]) {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            self.data[i] = rgb[0];
        } else {
            self.data[i..i + 3].copy_from_slice(rgb);
        }
    }

    fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        debug_assert_eq!(src.channels, self.channels);
        for y in 0..src.height {
            let d = ((y0 + y) * self.width + x0) * self.channels;
            let s = y * src.width * src.channels;
            let n = src.width * src.channels;
            self.data[d..d + n].copy_from_slice(&src.data[s..s + n]);
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, v: f32) {
        for y in y0..y0 + h {
            let d = (y * self.width + x0) * self.channels;
            self.data[d..d + w * self.channels].fill(v);
        }
    }

    /// Binary PGM (P5) for one channel, PPM (P6) for three; maxval 255.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
        );
        out
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pnm()).map_err(|e| Error::io(path, e))
    }
}

/// Colour tables for the object and background colour factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub object_colors: Vec<[f32; 3]>,
    pub background_colors: Vec<[f32; 3]>,
}

fn hsl_to_rgb(h: f32, s: f32, l: f32) -> [f32; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m]
}

impl Palette {
    /// Equally spaced hues on two HSL rings: bright saturated objects, dark
    /// muted backgrounds. The rings never intersect.
    pub fn for_space(space: &FactorSpace) -> Self {
        let n_obj = space
            .factor_with_role(RenderRole::ObjectColor)
            .map(|k| space.factors()[k].cardinality)
            .unwrap_or(0);
        let n_bg = space
            .factor_with_role(RenderRole::BackgroundColor)
            .map(|k| space.factors()[k].cardinality)
            .unwrap_or(0);
        Self {
            object_colors: (0..n_obj)
                .map(|i| hsl_to_rgb(i as f32 / n_obj as f32, 0.9, 0.6))
                .collect(),
            background_colors: (0..n_bg)
                .map(|i| hsl_to_rgb((i as f32 + 0.5) / n_bg as f32, 0.5, 0.2))
                .collect(),
        }
    }
}

/// Number of image channels a space renders to.
pub fn channels_for(space: &FactorSpace) -> usize {
    let colored = space.factor_with_role(RenderRole::ObjectColor).is_some()
        || space.factor_with_role(RenderRole::BackgroundColor).is_some();
    if colored {
        3
    } else {
        1
    }
}

/// Stateless renderer for one space; keeps the palette and role lookup.
#[derive(Clone, Debug)]
pub struct Renderer {
    space: FactorSpace,
    palette: Palette,
    channels: usize,
    shape: Option<usize>,
    size: Option<usize>,
    pos_x: Option<usize>,
    pos_y: Option<usize>,
    object_color: Option<usize>,
    background_color: Option<usize>,
}

fn frac(index: usize, cardinality: usize) -> f32 {
    index as f32 / (cardinality - 1) as f32
}

impl Renderer {
    pub fn new(space: &FactorSpace) -> Result<Self> {
        let shape = space.factor_with_role(RenderRole::Shape);
        if let Some(k) = shape {
            if space.factors()[k].cardinality > 4 {
                return Err(Error::Render(format!(
                    "shape factor has {} values; at most 4 shapes are drawable",
                    space.factors()[k].cardinality
                )));
            }
        }
        Ok(Self {
            space: space.clone(),
            palette: Palette::for_space(space),
            channels: channels_for(space),
            shape,
            size: space.factor_with_role(RenderRole::Size),
            pos_x: space.factor_with_role(RenderRole::PosX),
            pos_y: space.factor_with_role(RenderRole::PosY),
            object_color: space.factor_with_role(RenderRole::ObjectColor),
            background_color: space.factor_with_role(RenderRole::BackgroundColor),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn space(&self) -> &FactorSpace {
        &self.space
    }

    fn value_frac(&self, factor: Option<usize>, a: &FactorAssignment) -> f32 {
        match factor {
            Some(k) => frac(a[k], self.space.factors()[k].cardinality),
            None => 0.5,
        }
    }

    pub fn render(&self, a: &FactorAssignment, size: usize) -> Result<Image> {
        if !SUPPORTED_SIZES.contains(&size) {
            return Err(Error::Render(format!(
                "unsupported image size {size}; expected one of {SUPPORTED_SIZES:?}"
            )));
        }
        self.space.validate(a)?;
        let s = size as f32;
        let positioned = self.pos_x.is_some() || self.pos_y.is_some();
        let t = self.value_frac(self.size, a);
        let r = if positioned {
            s * (0.08 + 0.10 * t)
        } else {
            s * (0.10 + 0.20 * t)
        };
        let cx = s * (0.2 + 0.6 * self.value_frac(self.pos_x, a));
        let cy = s * (0.2 + 0.6 * self.value_frac(self.pos_y, a));
        let shape = self.shape.map(|k| a[k]).unwrap_or(0);
        let fg = self
            .object_color
            .map(|k| self.palette.object_colors[a[k]])
            .unwrap_or([1.0; 3]);
        let bg = self
            .background_color
            .map(|k| self.palette.background_colors[a[k]])
            .unwrap_or([0.0; 3]);

        let mut img = Image::filled(size, size, self.channels, 0.0);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let inside = match shape {
                    0 => dx.abs() <= r && dy.abs() <= r,
                    1 => {
                        let (ex, ey) = (dx / r, dy / (0.6 * r));
                        ex * ex + ey * ey <= 1.0
                    }
                    2 => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
                    _ => dx.abs() + dy.abs() <= r,
                };
                img.set(x, y, if inside { &fg } else { &bg });
            }
        }
        Ok(img)
    }

    /// 3x3 context grid (last cell blank) above the strip of six choices,
    /// separated by 1-pixel lines.
    pub fn render_grid(&self, puzzle: &RpmInstance, cell: usize) -> Result<Image> {
        let n_choices = puzzle.choices.len();
        let width = n_choices * cell + (n_choices - 1);
        let height = 4 * cell + 3;
        let mut canvas = Image::filled(width, height, self.channels, SEPARATOR);
        for row in 0..3 {
            for col in 0..3 {
                let (x0, y0) = (col * (cell + 1), row * (cell + 1));
                if row == 2 && col == 2 {
                    canvas.fill_rect(x0, y0, cell, cell, BLANK);
                } else {
                    canvas.blit(&self.render(&puzzle.grid[row][col], cell)?, x0, y0);
                }
            }
        }
        for (k, choice) in puzzle.choices.iter().enumerate() {
            canvas.blit(&self.render(choice, cell)?, k * (cell + 1), 3 * (cell + 1));
        }
        Ok(canvas)
    }
}

pub fn render(space: &FactorSpace, a: &FactorAssignment, size: usize) -> Result<Image> {
    Renderer::new(space)?.render(a, size)
}

pub fn render_grid(space: &FactorSpace, puzzle: &RpmInstance, cell: usize) -> Result<Image> {
    Renderer::new(space)?.render_grid(puzzle, cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn a(v: &[usize]) -> FactorAssignment {
        FactorAssignment::new(v.to_vec())
    }

    fn centroid_x(img: &Image, bg: f32) -> f64 {
        let (mut m, mut sx) = (0.0, 0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                if img.pixel(x, y)[0] != bg {
                    m += 1.0;
                    sx += x as f64 + 0.5;
                }
            }
        }
        sx / m
    }

    #[test]
    fn deterministic() {
        let s = FactorSpace::preset("toy2").unwrap();
        let x = render(&s, &a(&[2, 0]), 16).unwrap();
        let y = render(&s, &a(&[2, 0]), 16).unwrap();
        assert_eq!(x.to_pnm(), y.to_pnm());
        assert_eq!(x.channels, 3);
    }

    #[test]
    fn grayscale_is_two_level() {
        let s = FactorSpace::preset("dsprites-like").unwrap();
        let r = Renderer::new(&s).unwrap();
        assert_eq!(r.channels(), 1);
        for asg in s.enumerate().step_by(7) {
            let img = r.render(&asg, 32).unwrap();
            assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn pos_x_moves_centroid() {
        let s = FactorSpace::preset("dsprites-like").unwrap();
        let r = Renderer::new(&s).unwrap();
        let cs: Vec<f64> = (0..4)
            .map(|p| centroid_x(&r.render(&a(&[1, 1, p, 2]), 64).unwrap(), 0.0))
            .collect();
        assert!(cs.windows(2).all(|w| w[1] > w[0]), "{cs:?}");
    }

    #[test]
    fn injective_on_dsprites_grid() {
        let s = FactorSpace::preset("dsprites-like").unwrap();
        let r = Renderer::new(&s).unwrap();
        let imgs: HashSet<Vec<u8>> = s.enumerate().map(|x| r.render(&x, 64).unwrap().to_pnm()).collect();
        assert_eq!(imgs.len(), 144);
    }

    #[test]
    fn area_grows_with_size() {
        for preset in ["dsprites-like", "toy3", "mod-dsprites-like"] {
            let s = FactorSpace::preset(preset).unwrap();
            let r = Renderer::new(&s).unwrap();
            let k = s.factor_with_role(RenderRole::Size).unwrap();
            for base in s.enumerate().step_by(11) {
                let mut prev = 0usize;
                for v in 0..s.factors()[k].cardinality {
                    let mut x = base.clone();
                    x.values[k] = v;
                    let img = r.render(&x, 32).unwrap();
                    let bg = img.pixel(0, 0).to_vec();
                    let area = (0..32 * 32)
                        .filter(|i| img.pixel(i % 32, i / 32) != bg.as_slice())
                        .count();
                    assert!(area >= prev);
                    prev = area;
                }
            }
        }
    }

    #[test]
    fn rejects_unsupported_size() {
        let s = FactorSpace::preset("toy2").unwrap();
        assert!(render(&s, &a(&[0, 0]), 20).is_err());
        assert!(render(&s, &a(&[0, 9]), 16).is_err());
    }

    #[test]
    fn pnm_header() {
        let img = Image::filled(2, 1, 3, 1.0);
        let bytes = img.to_pnm();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255; 6]);
        let g = Image::filled(3, 2, 1, 0.5);
        assert!(g.to_pnm().starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(*g.to_pnm().last().unwrap(), 128);
    }
}
