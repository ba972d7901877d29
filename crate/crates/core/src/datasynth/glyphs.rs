//! Procedural stroke font: fixed 8x12 skeletons per character.
//!
//! Each glyph is a set of polylines on an 8-wide, 12-tall grid
//! (ascender top y=0, x-height top y=3, baseline y=9, descender bottom
//! y=11.5). The renderer scales, shears and thickens these strokes, so no
//! font file is needed and every render is reproducible.

/// Glyph design grid width.
pub const GLYPH_GRID_W: f32 = 8.0;
/// Glyph design grid height.
pub const GLYPH_GRID_H: f32 = 12.0;

type Poly = &'static [(f32, f32)];

/// Polylines for a character, or `None` if the character has no glyph.
/// The space character is a valid glyph with no strokes.
pub fn glyph_strokes(c: char) -> Option<&'static [Poly]> {
    Some(match c {
        ' ' => &[],
        'a' => &[
            &[(5.5, 4.0), (3.0, 3.2), (0.8, 6.0), (3.0, 9.0), (5.5, 8.0)],
            &[(5.5, 3.2), (5.5, 9.0)],
        ],
        'b' => &[
            &[(1.0, 0.0), (1.0, 9.0)],
            &[(1.0, 4.0), (3.5, 3.2), (5.5, 6.0), (3.5, 9.0), (1.0, 8.0)],
        ],
        'c' => &[&[(5.5, 4.0), (3.0, 3.2), (1.0, 6.0), (3.0, 9.0), (5.5, 8.2)]],
        'd' => &[
            &[(5.5, 0.0), (5.5, 9.0)],
            &[(5.5, 4.0), (3.0, 3.2), (1.0, 6.0), (3.0, 9.0), (5.5, 8.0)],
        ],
        'e' => &[
            &[(1.0, 6.0), (5.5, 6.0), (4.8, 3.5), (2.5, 3.2), (1.0, 6.0), (3.0, 9.0), (5.5, 8.3)],
        ],
        'f' => &[
            &[(5.0, 0.5), (3.5, 0.0), (2.8, 1.5), (2.8, 9.0)],
            &[(1.2, 3.5), (4.8, 3.5)],
        ],
        'g' => &[
            &[(5.5, 4.0), (3.0, 3.2), (1.0, 6.0), (3.0, 8.6), (5.5, 7.8)],
            &[(5.5, 3.2), (5.5, 10.5), (3.5, 11.5), (1.8, 10.8)],
        ],
        'h' => &[
            &[(1.0, 0.0), (1.0, 9.0)],
            &[(1.0, 4.6), (3.2, 3.2), (5.5, 4.8), (5.5, 9.0)],
        ],
        'i' => &[&[(3.0, 0.8), (3.0, 1.4)], &[(3.0, 3.4), (3.0, 9.0)]],
        'j' => &[
            &[(4.0, 0.8), (4.0, 1.4)],
            &[(4.0, 3.4), (4.0, 10.5), (2.5, 11.5), (1.2, 10.8)],
        ],
        'k' => &[
            &[(1.0, 0.0), (1.0, 9.0)],
            &[(5.2, 3.4), (1.0, 6.6)],
            &[(2.6, 5.4), (5.5, 9.0)],
        ],
        'l' => &[&[(3.0, 0.0), (3.0, 8.4), (3.8, 9.0)]],
        'm' => &[
            &[(0.8, 3.4), (0.8, 9.0)],
            &[(0.8, 4.4), (1.8, 3.2), (3.0, 4.4), (3.0, 9.0)],
            &[(3.0, 4.4), (4.2, 3.2), (5.5, 4.4), (5.5, 9.0)],
        ],
        'n' => &[
            &[(1.0, 3.4), (1.0, 9.0)],
            &[(1.0, 4.6), (3.0, 3.2), (5.5, 4.8), (5.5, 9.0)],
        ],
        'o' => &[&[(3.2, 3.2), (1.0, 6.0), (3.2, 9.0), (5.5, 6.0), (3.2, 3.2)]],
        'p' => &[
            &[(1.0, 3.4), (1.0, 11.5)],
            &[(1.0, 4.0), (3.5, 3.2), (5.5, 6.0), (3.5, 9.0), (1.0, 8.0)],
        ],
        'q' => &[
            &[(5.5, 4.0), (3.0, 3.2), (1.0, 6.0), (3.0, 9.0), (5.5, 8.0)],
            &[(5.5, 3.4), (5.5, 11.5), (6.5, 10.5)],
        ],
        'r' => &[
            &[(1.2, 3.4), (1.2, 9.0)],
            &[(1.2, 5.0), (3.2, 3.2), (5.2, 4.2)],
        ],
        's' => &[
            &[(5.4, 3.8), (2.8, 3.2), (1.2, 4.8), (5.0, 7.2), (3.4, 9.0), (0.9, 8.3)],
        ],
        't' => &[
            &[(2.8, 0.8), (2.8, 8.2), (3.8, 9.0), (5.0, 8.6)],
            &[(1.2, 3.4), (4.8, 3.4)],
        ],
        'u' => &[
            &[(1.0, 3.4), (1.0, 8.0), (3.0, 9.0), (5.5, 7.8)],
            &[(5.5, 3.4), (5.5, 9.0)],
        ],
        'v' => &[&[(0.8, 3.4), (3.2, 9.0), (5.6, 3.4)]],
        'w' => &[&[(0.5, 3.4), (1.8, 9.0), (3.2, 5.2), (4.6, 9.0), (5.9, 3.4)]],
        'x' => &[&[(1.0, 3.4), (5.5, 9.0)], &[(5.5, 3.4), (1.0, 9.0)]],
        'y' => &[
            &[(1.0, 3.4), (3.3, 9.0)],
            &[(5.6, 3.4), (2.2, 11.5), (1.0, 10.9)],
        ],
        'z' => &[&[(1.0, 3.4), (5.4, 3.4), (1.0, 9.0), (5.5, 9.0)]],
        _ => return None,
    })
}

/// Ink pixel count of a character rasterized alone with the given scale and
/// stroke thickness and no perturbations. Used as the reference for the
/// render ink-conservation check.
pub fn glyph_ink_count(c: char, scale: u32, thickness: u32) -> Option<usize> {
    let strokes = glyph_strokes(c)?;
    Some(super::render::rasterize_glyph(strokes, scale, thickness, 0.0).len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_lowercase_letters_and_space_have_glyphs() {
        for c in ('a'..='z').chain([' ']) {
            assert!(glyph_strokes(c).is_some(), "missing glyph {c:?}");
        }
        assert!(glyph_strokes('A').is_none());
        assert!(glyph_strokes('0').is_none());
    }

    #[test]
    fn strokes_stay_inside_the_design_grid() {
        for c in 'a'..='z' {
            for poly in glyph_strokes(c).unwrap() {
                for &(x, y) in *poly {
                    assert!((-0.5..=GLYPH_GRID_W).contains(&x), "{c}: x={x}");
                    assert!((-0.5..=GLYPH_GRID_H).contains(&y), "{c}: y={y}");
                }
            }
        }
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 'a'..='z' {
            let px: Vec<_> = {
                let mut v: Vec<_> =
                    super::super::render::rasterize_glyph(glyph_strokes(c).unwrap(), 2, 1, 0.0)
                        .into_iter()
                        .collect();
                v.sort_unstable();
                v
            };
            assert!(!px.is_empty(), "{c} renders no ink");
            assert!(seen.insert(px), "{c} collides with another glyph");
        }
    }
}
