use super::{AgentState, ObjectClass, WorldState, IMAGE_CHANNELS};
use crate::bbox::BBox;
use crate::tensor::Tensor;

type Rgb = [f32; 3];

const SIDEWALK: Rgb = [0.55, 0.55, 0.50];
const ROAD: Rgb = [0.20, 0.20, 0.22];
const STRIPE: Rgb = [0.95, 0.95, 0.95];
const VEHICLE: Rgb = [0.15, 0.35, 0.85];
const PEDESTRIAN: Rgb = [0.95, 0.55, 0.15];
const MARKER: Rgb = [0.10, 0.95, 0.95];
const HOUSING: Rgb = [0.05, 0.05, 0.05];
const LAMP_RED: Rgb = [1.0, 0.0, 0.0];
const LAMP_GREEN: Rgb = [0.0, 1.0, 0.0];

/// Side of the square heading marker, in unscaled pixels.
pub const MARKER_SIZE: f64 = 4.0;

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    /// Fills every pixel whose center lies inside the box.
    fn fill(&mut self, b: &BBox, color: Rgb) {
        let x0 = (b.x0() - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y0() - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x1() - 0.5).ceil().max(0.0) as usize).min(self.w);
        let y1 = ((b.y1() - 0.5).ceil().max(0.0) as usize).min(self.h);
        let plane = self.h * self.w;
        for y in y0..y1 {
            for x in x0..x1 {
                for (ch, &v) in color.iter().enumerate() {
                    self.data[ch * plane + y * self.w + x] = v;
                }
            }
        }
    }
}

/// Box of the heading marker drawn for a pedestrian: a small square on the
/// body edge the pedestrian faces, at head height.
pub fn heading_marker(agent: &AgentState, scale: f64) -> BBox {
    let (cx, cy) = agent.center;
    let (w, h) = agent.size;
    let (hx, hy) = agent.heading;
    let m = MARKER_SIZE * scale;
    BBox::new(cx + hx * 0.5 * w, cy - 0.25 * h + hy * 0.25 * h, m, m)
}

/// Light housing with its lit lamp in the top (red) or bottom (green) half.
fn draw_light(canvas: &mut Canvas, b: &BBox, red: bool) {
    canvas.fill(b, HOUSING);
    let lamp = BBox::new(
        b.cx,
        if red { b.cy - 0.25 * b.h } else { b.cy + 0.25 * b.h },
        0.6 * b.w,
        0.3 * b.h,
    );
    canvas.fill(&lamp, if red { LAMP_RED } else { LAMP_GREEN });
}

/// Renders a `[3, H, W]` image. Pure function of the world state; agents
/// are clipped to the image by rasterisation.
pub fn render_frame(state: &WorldState) -> Tensor<f32> {
    let (h, w) = (state.image_height, state.image_width);
    let mut canvas = Canvas {
        h,
        w,
        data: vec![0.0; IMAGE_CHANNELS * h * w],
    };
    let scale = h as f64 / 192.0;
    canvas.fill(&BBox::from_corners(0.0, 0.0, w as f64, h as f64), SIDEWALK);
    let (top, bottom) = state.road_band;
    canvas.fill(&BBox::from_corners(0.0, top, w as f64, bottom), ROAD);

    let layer = |c: ObjectClass| match c {
        ObjectClass::Crosswalk => 0,
        ObjectClass::TrafficLight => 1,
        ObjectClass::Vehicle => 2,
        ObjectClass::Pedestrian => 3,
    };
    let mut order: Vec<&AgentState> = state.agents.iter().collect();
    order.sort_by_key(|a| (layer(a.class), a.track_id));
    for a in order {
        let b = a.bbox();
        match a.class {
            ObjectClass::Crosswalk => {
                let stripe = 4.0 * scale;
                let n = (b.w / stripe).floor() as usize;
                for s in (0..n).step_by(2) {
                    let x0 = b.x0() + s as f64 * stripe;
                    canvas.fill(&BBox::from_corners(x0, b.y0(), x0 + stripe, b.y1()), STRIPE);
                }
            }
            ObjectClass::TrafficLight => draw_light(&mut canvas, &b, state.light_red.unwrap_or(true)),
            ObjectClass::Vehicle => canvas.fill(&b, VEHICLE),
            ObjectClass::Pedestrian => {
                canvas.fill(&b, PEDESTRIAN);
                canvas.fill(&heading_marker(a, scale), MARKER);
            }
        }
    }
    Tensor::from_vec(&[IMAGE_CHANNELS, h, w], canvas.data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Intent;

    fn empty_state(agents: Vec<AgentState>, light_red: Option<bool>) -> WorldState {
        WorldState {
            image_height: 192,
            image_width: 320,
            road_band: (80.0, 128.0),
            agents,
            light_red,
        }
    }

    fn pixel(img: &Tensor<f32>, ch: usize, y: usize, x: usize) -> f32 {
        img.data()[(ch * 192 + y) * 320 + x]
    }

    #[test]
    fn empty_world_is_background() {
        let img = render_frame(&empty_state(vec![], None));
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // only the two background tones appear, banded by rows
        for y in 0..192 {
            let want = if (80..128).contains(&y) { ROAD } else { SIDEWALK };
            for x in 0..320 {
                for ch in 0..3 {
                    assert_eq!(pixel(&img, ch, y, x), want[ch]);
                }
            }
        }
    }

    #[test]
    fn pedestrian_pixels_are_box_and_marker_only() {
        // 8x8 pedestrian with corners on integer pixels: columns 20..28, rows 30..38.
        let ped = AgentState {
            track_id: 1,
            class: ObjectClass::Pedestrian,
            center: (24.0, 34.0),
            size: (8.0, 8.0),
            velocity: (1.0, 0.0),
            intent: Intent::NotCross,
            heading: (1.0, 0.0),
        };
        let bg = render_frame(&empty_state(vec![], None));
        let img = render_frame(&empty_state(vec![ped], None));
        // marker: 4x4 centered at (28, 32): columns 26..30, rows 30..34
        let mut expected = std::collections::HashSet::new();
        for y in 30..38 {
            for x in 20..28 {
                expected.insert((y, x));
            }
        }
        for y in 30..34 {
            for x in 26..30 {
                expected.insert((y, x));
            }
        }
        for y in 0..192 {
            for x in 0..320 {
                let changed = (0..3).any(|ch| pixel(&img, ch, y, x) != pixel(&bg, ch, y, x));
                assert_eq!(changed, expected.contains(&(y, x)), "pixel ({y}, {x})");
            }
        }
        assert_eq!(pixel(&img, 0, 37, 21), PEDESTRIAN[0]);
        assert_eq!(pixel(&img, 1, 31, 29), MARKER[1]);
    }

    #[test]
    fn light_state_changes_only_the_light_box() {
        let light = AgentState {
            track_id: 1,
            class: ObjectClass::TrafficLight,
            center: (100.0, 64.0),
            size: (10.0, 24.0),
            velocity: (0.0, 0.0),
            intent: Intent::NotApplicable,
            heading: (0.0, 0.0),
        };
        let red = render_frame(&empty_state(vec![light], Some(true)));
        let green = render_frame(&empty_state(vec![light], Some(false)));
        assert_ne!(red, green);
        let b = light.bbox();
        for y in 0..192 {
            for x in 0..320 {
                let inside = (x as f64 + 0.5) > b.x0()
                    && (x as f64 + 0.5) < b.x1()
                    && (y as f64 + 0.5) > b.y0()
                    && (y as f64 + 0.5) < b.y1();
                if !inside {
                    for ch in 0..3 {
                        assert_eq!(pixel(&red, ch, y, x), pixel(&green, ch, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_frame_agent_is_clipped() {
        let v = AgentState {
            track_id: 1,
            class: ObjectClass::Vehicle,
            center: (-100.0, 100.0),
            size: (50.0, 20.0),
            velocity: (5.0, 0.0),
            intent: Intent::NotApplicable,
            heading: (0.0, 0.0),
        };
        assert_eq!(render_frame(&empty_state(vec![v], None)), render_frame(&empty_state(vec![], None)));
    }
}
