use synthvox_core::world::{fresh_utterances, make_world, timbre_perturb, timbre_perturb_to, ProbeConfig, Probes, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn probes_pass_gate_and_respect_timbre_invariance() {
    let world = make_world(11, &WorldConfig::default()).unwrap();
    let probes = Probes::train(&world, &ProbeConfig::default(), 5).unwrap();
    println!("held-out {:?}", probes.heldout);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fresh = fresh_utterances(&world, 1000, &mut rng).unwrap();
    let acc = probes.accuracy(&fresh);
    println!("fresh {acc:?}");
    assert!(acc.failures().is_empty(), "{acc:?}");

    let mut same_style = 0;
    let mut new_speaker = 0;
    let mut rerender_same = 0;
    for u in fresh.iter().take(300) {
        let before = probes.decode(&u.frames, &u.content);
        let p = timbre_perturb(&world, u, &mut rng).unwrap();
        let after = probes.decode(&p.frames, &p.content);
        same_style += (before.factors == after.factors) as usize;
        new_speaker += (after.speaker == p.speaker) as usize;
        let mut desc = u.desc();
        desc.noise_seed ^= 0x5eed;
        desc.content = synthvox_core::world::sample_content(&world, &mut rng);
        let again = synthvox_core::world::Utterance::render(&world, &desc).unwrap();
        rerender_same += (probes.predict_speaker(&again.frames) == u.speaker) as usize;
        assert_eq!(timbre_perturb_to(&world, u, u.speaker).unwrap().frames, u.frames);
    }
    assert!(same_style as f64 / 300.0 >= 0.95, "{same_style}");
    assert!(new_speaker as f64 / 300.0 >= 0.98, "{new_speaker}");
    assert!(rerender_same as f64 / 300.0 >= 0.98, "{rerender_same}");

    let zeros = synthvox_core::Tensor::<f32>::zeros(&[40, 16]);
    let d = probes.decode(&zeros, &fresh[0].content);
    assert!(d.content.error >= 0.5, "{d:?}");
}
