//! Minimal 5×7 bitmap font for raster annotations. Covers exactly the
//! characters the overlay renderer emits (`MRE 12.34px` / `MRE n/a`);
//! anything else renders as a filled block so a formatting slip is visible
//! in the output instead of silently blank.

/// Glyph height in pixels.
pub const GLYPH_H: usize = 7;
/// Glyph width in pixels.
pub const GLYPH_W: usize = 5;
/// Horizontal advance between glyph origins.
pub const ADVANCE: usize = GLYPH_W + 1;

/// Rows of a 5-wide glyph, most significant of the low 5 bits = leftmost.
pub fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101],
        'n' => [0b00000, 0b00000, 0b11110, 0b10001, 0b10001, 0b10001, 0b10001],
        'p' => [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        ' ' => [0; GLYPH_H],
        _ => [0b11111; GLYPH_H],
    }
}

/// Pixel width of a rendered string.
pub fn text_width(text: &str) -> usize {
    text.chars().count() * ADVANCE
}

/// Call `set(row, col)` for every lit pixel of `text` laid out with its
/// top-left corner at `(top, left)`.
pub fn for_each_pixel(text: &str, top: usize, left: usize, mut set: impl FnMut(usize, usize)) {
    for (k, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let x0 = left + k * ADVANCE;
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - dx)) != 0 {
                    set(top + dy, x0 + dx);
                }
            }
        }
    }
}
