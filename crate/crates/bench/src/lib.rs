//! Shared inputs for the benchmarks.

use hiproto::corpus::{synth_waveforms, Recordings, ToyShape};
use hiproto::dsp::{log_mel, loudest_segment, LogMelSpectrogram, Waveform};
use hiproto::trainer::{sample_episode, Episode, EpisodeSpec};
use hiproto::TaxonomyTree;

/// The toy corpus at its default shape.
pub fn toy(per_class: usize) -> (TaxonomyTree, Recordings) {
    let (tree, items) = synth_waveforms(ToyShape::default(), per_class, 1).expect("toy corpus");
    (tree, Recordings::new(items))
}

/// One second of the first toy recording.
pub fn segment() -> (Waveform, LogMelSpectrogram) {
    let (_, rec) = toy(1);
    let w = loudest_segment(rec.waveform(0)).expect("segment").waveform;
    let x = log_mel(&w).expect("log-mel");
    (w, x)
}

/// A clean `ways`-way episode drawn from the toy corpus.
pub fn episode(ways: usize, shots: usize, queries: usize) -> (TaxonomyTree, Episode) {
    let (tree, rec) = toy(shots + queries);
    let spec = EpisodeSpec {
        ways,
        shots,
        queries,
        weights: [0, 100, 0],
        ..Default::default()
    };
    let ep = sample_episode(&rec, &tree, &spec, None, 2).expect("episode");
    (tree, ep)
}
