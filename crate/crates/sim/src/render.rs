use crate::world::WorldState;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

const ARM_RADIUS: f64 = 2.0;
const ARM_OPEN: u8 = 140;
const ARM_CLOSED: u8 = 255;
const BLOCK: u8 = 255;
const GOAL: u8 = 64;

/// 8-bit HWC image. Pixel values map to `[0, 1]` by dividing by 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[self.idx(y, x, c)]
    }

    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        self.get(y, x, c) as f64 / 255.0
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    fn lighten(&mut self, y: isize, x: isize, c: usize, v: u8) {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return;
        }
        let i = self.idx(y as usize, x as usize, c);
        self.data[i] = self.data[i].max(v);
    }

    /// Values in `[0, 1]`, HWC order.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Binary PPM (P6) encoding; requires three channels.
    pub fn to_ppm(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "PPM needs RGB");
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Option<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
        }
        if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
            return None;
        }
        let width: usize = fields[1].parse().ok()?;
        let height: usize = fields[2].parse().ok()?;
        let data = bytes.get(pos + 1..)?.to_vec();
        (data.len() == width * height * 3).then_some(Self {
            height,
            width,
            channels: 3,
            data,
        })
    }
}

fn to_pixel(p: [f64; 2]) -> (isize, isize) {
    let n = IMAGE_SIZE as f64;
    let col = ((p[0] * n).floor() as isize).clamp(0, IMAGE_SIZE as isize - 1);
    let row = (((1.0 - p[1]) * n).floor() as isize).clamp(0, IMAGE_SIZE as isize - 1);
    (row, col)
}

/// Rasterizes the state: goal outlines in grey, blocks as green 3×3 squares,
/// the left effector as a red disc and the right as a blue disc (brighter
/// when the gripper is closed).
pub fn render(state: &WorldState) -> Image {
    let mut img = Image::blank(IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS);

    for g in &state.spec.goals {
        let (r0, c0) = to_pixel([g.x0, g.y1]);
        let (r1, c1) = to_pixel([g.x1, g.y0]);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if r == r0 || r == r1 || c == c0 || c == c1 {
                    for ch in 0..IMAGE_CHANNELS {
                        img.lighten(r, c, ch, GOAL);
                    }
                }
            }
        }
    }

    for b in &state.blocks {
        let (r, c) = to_pixel(b.pos);
        for dr in -1..=1 {
            for dc in -1..=1 {
                img.lighten(r + dr, c + dc, 1, BLOCK);
            }
        }
    }

    let reach = ARM_RADIUS.ceil() as isize;
    for (pos, grip, ch) in [(state.left_ee, state.left_grip, 0), (state.right_ee, state.right_grip, 2)] {
        let (r, c) = to_pixel(pos);
        let v = if grip > 0.0 { ARM_CLOSED } else { ARM_OPEN };
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                if ((dr * dr + dc * dc) as f64) <= ARM_RADIUS * ARM_RADIUS {
                    img.lighten(r + dr, c + dc, ch, v);
                }
            }
        }
    }
    img
}
