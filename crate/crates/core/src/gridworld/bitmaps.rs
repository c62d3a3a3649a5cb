//! The 10×10 sprites the renderer paints and the detectors match against.
//!
//! `#` is painted in the object color, `.` in the background color. The
//! four sprites have exactly zero pairwise Pearson correlation, so a
//! normalized cross-correlation detector scores every foreign sprite at 0.

use super::ObjectType;

pub const SPRITE: usize = 10;

/// Octagonal 1-px ring, 20 px.
pub const CIRCLE: [&str; SPRITE] = [
    "..........",
    "...####...",
    "..#....#..",
    ".#......#.",
    ".#......#.",
    ".#......#.",
    ".#......#.",
    "..#....#..",
    "...####...",
    "..........",
];

/// 6×6 outline, 20 px.
pub const SQUARE: [&str; SPRITE] = [
    "..........",
    "..........",
    "..######..",
    "..#....#..",
    "..#....#..",
    "..#....#..",
    "..#....#..",
    "..######..",
    "..........",
    "..........",
];

/// Both full diagonals, 1 px, 20 px.
pub const CROSS: [&str; SPRITE] = [
    "#........#",
    ".#......#.",
    "..#....#..",
    "...#..#...",
    "....##....",
    "....##....",
    "...#..#...",
    "..#....#..",
    ".#......#.",
    "#........#",
];

/// 2-px plus sign with corner ticks, 40 px.
pub const AGENT: [&str; SPRITE] = [
    "#...##...#",
    "....##....",
    "....##....",
    "....##....",
    "##########",
    "##########",
    "....##....",
    "....##....",
    "....##....",
    "#...##...#",
];

/// Row-major 0/1 mask of a sprite.
pub type Mask = [u8; SPRITE * SPRITE];

const fn parse(rows: [&str; SPRITE]) -> Mask {
    let mut out = [0u8; SPRITE * SPRITE];
    let mut r = 0;
    while r < SPRITE {
        let bytes = rows[r].as_bytes();
        let mut c = 0;
        while c < SPRITE {
            if bytes[c] == b'#' {
                out[r * SPRITE + c] = 1;
            }
            c += 1;
        }
        r += 1;
    }
    out
}

pub const CIRCLE_MASK: Mask = parse(CIRCLE);
pub const SQUARE_MASK: Mask = parse(SQUARE);
pub const CROSS_MASK: Mask = parse(CROSS);
pub const AGENT_MASK: Mask = parse(AGENT);

pub fn object_mask(t: ObjectType) -> &'static Mask {
    match t {
        ObjectType::Circle => &CIRCLE_MASK,
        ObjectType::Square => &SQUARE_MASK,
        ObjectType::Cross => &CROSS_MASK,
    }
}

pub fn pixel_count(mask: &Mask) -> usize {
    mask.iter().filter(|&&b| b == 1).count()
}
