//! Scratch diagnostic (run manually): how much additive noise on REAL
//! toyset audio the eval embedder tolerates before speaker wins flip,
//! and the mel-L1 each noise level corresponds to.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semtts_core::data::{read_wav, Waveform};
use semtts_core::features::extract_features;
use semtts_core::metrics::cosine_similarity;
use semtts_core::speaker::embed_speaker_eval;
use semtts_core::toyset::{make_corpus, render, ToySpec};
use semtts_core::MODEL_SAMPLE_RATE;

fn tile(w: &Waveform) -> Waveform {
    let min_len = MODEL_SAMPLE_RATE as usize;
    if w.len() >= min_len {
        return w.clone();
    }
    let mut samples = Vec::with_capacity(min_len);
    while samples.len() < min_len {
        let take = (min_len - samples.len()).min(w.len());
        samples.extend_from_slice(&w.samples[..take]);
    }
    Waveform::new(samples, w.sample_rate).unwrap()
}

fn mel_l1(a: &Waveform, b: &Waveform) -> f64 {
    let fa = extract_features(a).unwrap().frames;
    let fb = extract_features(b).unwrap().frames;
    let n = fa.nrows().min(fb.nrows());
    let mut sum = 0.0;
    for t in 0..n {
        for d in 0..fa.ncols() {
            sum += (f64::from(fa[[t, d]]) - f64::from(fb[[t, d]])).abs();
        }
    }
    sum / (n as f64 * fa.ncols() as f64)
}

#[test]
#[ignore]
fn probe_noise_tolerance() {
    let spec = ToySpec::default();
    let dir = tempfile::tempdir().unwrap();
    let corpus = make_corpus(&spec, dir.path(), 20, 12).unwrap();
    let ref_a = render(&spec, "abcd efgh", 0, 1.0).unwrap();
    let ref_b = render(&spec, "abcd efgh", 1, 1.0).unwrap();
    let ea = embed_speaker_eval(&ref_a).unwrap();
    let eb = embed_speaker_eval(&ref_b).unwrap();

    let audios: Vec<Waveform> = corpus
        .utterances
        .iter()
        .map(|u| read_wav(&u.audio_path).unwrap())
        .collect();

    for snr_db in [30.0f64, 20.0, 15.0, 10.0, 6.0, 3.0, 0.0, -3.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut wins = 0;
        let mut mel_sum = 0.0;
        let mut cond_sum = 0.0;
        let mut other_sum = 0.0;
        for (i, a) in audios.iter().enumerate() {
            let sig_pow: f64 = a.samples.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>()
                / a.len() as f64;
            let noise_std = (sig_pow / 10f64.powf(snr_db / 10.0)).sqrt();
            let noisy: Vec<f32> = a
                .samples
                .iter()
                .map(|&x| {
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    let g = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    x + (noise_std * g) as f32
                })
                .collect();
            let noisy = Waveform::new(noisy, a.sample_rate).unwrap();
            mel_sum += mel_l1(a, &noisy);
            let e = embed_speaker_eval(&tile(&noisy)).unwrap();
            let sa = cosine_similarity(&e, &ea).unwrap();
            let sb = cosine_similarity(&e, &eb).unwrap();
            let (c, o) = if corpus.speaker_indices[i] == 0 {
                (sa, sb)
            } else {
                (sb, sa)
            };
            cond_sum += c;
            other_sum += o;
            if c > o {
                wins += 1;
            }
        }
        println!(
            "snr {snr_db:>5.1} dB: wins {wins}/20, mel-L1 {:.3}, cond {:.4} other {:.4}",
            mel_sum / 20.0,
            cond_sum / 20.0,
            other_sum / 20.0
        );
    }
    // Unused import guard.
    let _ = Array2::<f32>::zeros((1, 1));
}
