//! Rasterization of shapes and hand markers.

/// Outline of a noun's object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Diamond,
    Cross,
}

pub const COLORS: [[f32; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95], [0.9, 0.85, 0.2]];
pub const HAND_COLOR: [f32; 3] = [1.0, 0.75, 0.6];

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Disc, Shape::Diamond, Shape::Cross];

/// Shape and color of noun `k` out of `num_nouns`. Every shape comes in
/// several colors and every color in several shapes, so neither cue alone
/// identifies the noun.
pub fn noun_appearance(k: usize, num_nouns: usize) -> (Shape, [f32; 3]) {
    let s = if num_nouns <= 9 { 3 } else { 4 };
    (SHAPES[k % s], COLORS[(k + k / s) % s])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Normalized center in `[-1, 1]²`.
    pub center: [f32; 2],
    /// Half-extent in pixels.
    pub radius: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameState<'a> {
    pub size: usize,
    /// `size × size × 3` background, row-major.
    pub background: &'a [f32],
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectState>,
    pub hands: [[f32; 2]; 2],
}

/// Pixel-space position of a normalized coordinate; pixel `j` spans `[j, j+1)`
/// and its center sits at normalized `(2j + 1)/W − 1`.
pub fn to_pixel(c: f32, size: usize) -> f32 {
    (c + 1.0) * 0.5 * size as f32 - 0.5
}

fn covers(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Diamond => dx.abs() + dy.abs() <= r * 1.3,
        Shape::Cross => (dx.abs() <= r * 0.4 && dy.abs() <= r) || (dy.abs() <= r * 0.4 && dx.abs() <= r),
    }
}

/// Renders one `size × size × 3` frame with values in `[0, 1]`.
pub fn render_frame(state: &FrameState<'_>) -> Vec<f32> {
    let n = state.size;
    let mut img = state.background.to_vec();
    for obj in &state.objects {
        let (cx, cy) = (to_pixel(obj.center[0], n), to_pixel(obj.center[1], n));
        let lo_x = (cx - obj.radius * 1.3).floor().max(0.0) as usize;
        let hi_x = ((cx + obj.radius * 1.3).ceil() as isize).clamp(0, n as isize - 1) as usize;
        let lo_y = (cy - obj.radius * 1.3).floor().max(0.0) as usize;
        let hi_y = ((cy + obj.radius * 1.3).ceil() as isize).clamp(0, n as isize - 1) as usize;
        for i in lo_y..=hi_y {
            for j in lo_x..=hi_x {
                if covers(obj.shape, j as f32 - cx, i as f32 - cy, obj.radius) {
                    img[(i * n + j) * 3..(i * n + j) * 3 + 3].copy_from_slice(&obj.color);
                }
            }
        }
    }
    for h in &state.hands {
        let (cx, cy) = (to_pixel(h[0], n).round() as isize, to_pixel(h[1], n).round() as isize);
        for i in cy - 1..=cy + 1 {
            for j in cx - 1..=cx + 1 {
                if (0..n as isize).contains(&i) && (0..n as isize).contains(&j) {
                    let o = (i as usize * n + j as usize) * 3;
                    img[o..o + 3].copy_from_slice(&HAND_COLOR);
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}
