//! Shared inputs for the benchmarks.

use trainerfit::dsp::Waveform;
use trainerfit::training::synthetic_utterance;

/// One second of the synthetic test signal at 16 kHz.
pub fn second_of_speech() -> Waveform {
    synthetic_utterance(16000, 16000, 11).expect("valid length")
}
