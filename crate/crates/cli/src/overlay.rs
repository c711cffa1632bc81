use syncvis::data_synth::{Frame, VideoSample};
use syncvis::evaluator::TrackPrediction;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// 3×5 glyphs for the digits 0-9, one row per entry, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Track `i` of the list always gets the same colour.
pub fn track_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn put(rgb: &mut [u8], w: usize, y: usize, x: usize, c: [u8; 3]) {
    let o = (y * w + x) * 3;
    rgb[o..o + 3].copy_from_slice(&c);
}

/// Draws `label` with its top-left corner at `(y, x)` on a black box,
/// clipped to the frame.
fn draw_label(rgb: &mut [u8], h: usize, w: usize, y: usize, x: usize, label: usize, color: [u8; 3]) {
    let digits: Vec<usize> = label.to_string().bytes().map(|b| usize::from(b - b'0')).collect();
    let bw = digits.len() * 4 + 1;
    for dy in 0..7 {
        for dx in 0..bw {
            if y + dy < h && x + dx < w {
                put(rgb, w, y + dy, x + dx, [0, 0, 0]);
            }
        }
    }
    for (k, &d) in digits.iter().enumerate() {
        for (r, bits) in DIGITS[d].iter().enumerate() {
            for c in 0..3 {
                let (py, px) = (y + 1 + r, x + 1 + k * 4 + c);
                if bits & (0b100 >> c) != 0 && py < h && px < w {
                    put(rgb, w, py, px, color);
                }
            }
        }
    }
}

/// Frames of `video` with every track's mask blended in its colour and its
/// 1-based track number drawn at the mask's top-left corner.
pub fn render(video: &VideoSample, tracks: &[TrackPrediction]) -> Vec<Frame> {
    let (h, w) = (video.height, video.width);
    video
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut rgb = frame.rgb().to_vec();
            for (i, tr) in tracks.iter().enumerate() {
                let Some(mask) = tr.masks.get(t).and_then(Option::as_ref) else {
                    continue;
                };
                let color = track_color(i);
                for y in 0..h {
                    for x in 0..w {
                        if mask.get(y, x) {
                            let o = (y * w + x) * 3;
                            for c in 0..3 {
                                rgb[o + c] = ((u16::from(rgb[o + c]) + u16::from(color[c])) / 2) as u8;
                            }
                        }
                    }
                }
            }
            for (i, tr) in tracks.iter().enumerate() {
                let Some(mask) = tr.masks.get(t).and_then(Option::as_ref) else {
                    continue;
                };
                let top_left = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .filter(|&(y, x)| mask.get(y, x))
                    .fold((h, w), |(my, mx), (y, x)| (my.min(y), mx.min(x)));
                draw_label(&mut rgb, h, w, top_left.0, top_left.1, i + 1, track_color(i));
            }
            Frame::new(h, w, rgb)
        })
        .collect()
}
