use super::{Cell, Color, Pos, SymbolicState, CELLS, GRID};
use crate::raster::Raster;

/// Pixels per grid cell.
pub const CELL_PX: usize = 8;
pub const RASTER_PX: usize = GRID * CELL_PX;
pub const BACKGROUND: [u8; 3] = [20, 20, 20];

pub fn color_rgb(c: Color) -> [u8; 3] {
    match c {
        Color::Red => [220, 40, 40],
        Color::Green => [40, 200, 60],
        Color::Blue => [50, 90, 235],
        Color::Yellow => [235, 215, 40],
        Color::Purple => [160, 60, 200],
        Color::Orange => [245, 140, 30],
    }
}

/// Draws the state: bowls are a one-pixel ring on the cell border, blocks a
/// filled 6x6 square inside it. A block in a bowl shows both.
pub fn render(s: &SymbolicState) -> Raster {
    let mut r = Raster::filled(RASTER_PX, RASTER_PX, BACKGROUND);
    for i in 0..CELLS {
        let cell = s.cells()[i];
        if cell == Cell::Empty {
            continue;
        }
        let p = Pos::from_index(i);
        let (y0, x0) = (p.row * CELL_PX, p.col * CELL_PX);
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                let ring = dy == 0 || dx == 0 || dy == CELL_PX - 1 || dx == CELL_PX - 1;
                let rgb = if ring { cell.bowl() } else { cell.block() };
                if let Some(c) = rgb {
                    r.set_pixel(y0 + dy, x0 + dx, color_rgb(c));
                }
            }
        }
    }
    r
}

/// Reads the cell contents back from a rendered raster; unknown pixel colors
/// read as absent.
pub fn decode_cell(r: &Raster, p: Pos) -> (Option<Color>, Option<Color>) {
    let (y0, x0) = (p.row * CELL_PX, p.col * CELL_PX);
    let lookup = |rgb: [u8; 3]| Color::ALL.into_iter().find(|c| color_rgb(*c) == rgb);
    let block = lookup(r.pixel(y0 + CELL_PX / 2, x0 + CELL_PX / 2));
    let bowl = lookup(r.pixel(y0, x0));
    (block, bowl)
}
