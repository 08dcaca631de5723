//! Middlebury flow color coding: hue encodes direction, saturation encodes
//! magnitude relative to the largest vector in the field.

use super::FlowField;
use crate::trackio::Frame;

fn color_wheel() -> Vec<[f32; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| i as f32 / n as f32;
    for i in 0..RY {
        wheel.push([1.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([1.0 - ramp(i, YG), 1.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 1.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 1.0 - ramp(i, CB), 1.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 1.0]);
    }
    for i in 0..MR {
        wheel.push([1.0, 0.0, 1.0 - ramp(i, MR)]);
    }
    wheel
}

/// RGB rendering of a flow field. A zero field renders white.
pub fn flow_to_color(flow: &FlowField) -> Frame {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max_mag = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(u, v)| u.hypot(*v))
        .fold(0.0f32, f32::max);
    let n = flow.height * flow.width;
    let mut data = vec![1.0f32; 3 * n];
    if max_mag > 0.0 {
        for i in 0..n {
            let (u, v) = (flow.u[i] / max_mag, flow.v[i] / max_mag);
            let rad = u.hypot(v);
            let a = (-v).atan2(-u) / std::f32::consts::PI;
            let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
            let k0 = fk.floor() as usize % ncols;
            let k1 = (k0 + 1) % ncols;
            let f = fk - fk.floor();
            for c in 0..3 {
                let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
                data[c * n + i] = 1.0 - rad * (1.0 - col);
            }
        }
    }
    Frame::new(flow.height, flow.width, 3, data).expect("finite colors")
}
