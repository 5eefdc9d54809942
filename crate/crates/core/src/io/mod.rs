//! On-disk formats: Middlebury flow files, raw planar float frames, and
//! 8-bit PNG images.

pub mod flo;
pub mod png;
pub mod rawf32;

pub use flo::{read_flo, write_flo};
pub use png::{read_gray_png, read_rgb_png, write_gray_png, write_rgb_png};
pub use rawf32::{read_rawf32, write_rawf32};
