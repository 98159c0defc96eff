//! Echo delays of the channel model against simulated impulse responses.

use echosep::acoustics::{audible_images, default_array, sample_scenarios, synthesize_rir, Room};
use echosep::echomodel::{echo_model, DelayReference};

const ORDER: usize = 4;

#[test]
fn six_echoes_sit_on_rir_peaks() {
    let room = Room::default_seven_wall(0.4, 16000).unwrap();
    let mics = default_array();
    let (scenario, _) = sample_scenarios(&room, &mics, 6, (2.5, 4.0), 1.0, 5).unwrap();
    let fs = room.sample_rate as f64;
    let c = room.speed_of_sound;
    let model = echo_model(&room, &mics, &scenario.source_positions, 6, 1.0, DelayReference::PerChannel).unwrap();
    let (mut checked, mut isolated) = (0, 0);
    for (j, &src) in scenario.source_positions.iter().enumerate() {
        for (m, &mic) in mics.iter().enumerate() {
            let direct = src.distance(mic) / c;
            let arrivals: Vec<f64> = audible_images(&room, src, mic, ORDER)
                .unwrap()
                .iter()
                .map(|i| i.delay_s(mic, c))
                .collect();
            let taps = synthesize_rir(&room, src, mic, ORDER).unwrap().taps;
            let delays = &model.channels[j][m].delays_s;
            assert_eq!(delays.len(), 7);
            for &tau in &delays[1..] {
                let t = direct + tau;
                // every modelled echo is a simulated arrival
                assert!(arrivals.iter().any(|&a| (a - t).abs() < 1e-9), "echo at {t} s not in the RIR");
                checked += 1;
                let near = arrivals.iter().filter(|&&a| ((a - t) * fs).abs() < 4.0).count();
                if near > 1 {
                    continue;
                }
                isolated += 1;
                let centre = (t * fs).round() as usize;
                let peak = (centre - 3..=centre + 3)
                    .max_by(|&a, &b| taps[a].abs().total_cmp(&taps[b].abs()))
                    .unwrap();
                assert!((peak as f64 - t * fs).abs() <= 1.0, "peak at {peak}, echo at {} samples", t * fs);
            }
        }
    }
    assert_eq!(checked, 6 * 3 * 6);
    assert!(isolated * 2 > checked, "only {isolated} of {checked} echoes isolated");
}
