use std::time::Instant;

use abound::bundle::{synthesize_dataset, Split, SynthConfig};
use abound::infer::{score_image, MemoryBanks, ScoreConfig};
use abound::metrics::{auroc, ScoredSet};
use abound::trainer::{fit, TrainConfig};

#[test]
fn default_benchmark_separates_anomalies() {
    for seed in 0..3 {
        let t = Instant::now();
        let b = synthesize_dataset(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let (model, _) = fit(&b, TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let trained = t.elapsed();
        let banks = MemoryBanks::build(&b, &model).unwrap();
        let (mut img, mut lab, mut px, mut plab) = (vec![], vec![], vec![], vec![]);
        let mut correct = 0;
        let refs = b.test_refs();
        for r in &refs {
            let s = b.sample(*r);
            let out = score_image(s, &banks, &model, &ScoreConfig::default(), None).unwrap();
            correct += (out.class_pred == r.class) as usize;
            img.push(out.map.score);
            lab.push(r.split == Split::TestAnomaly);
            let cells = out.map.fused.len();
            let mask = s.mask.clone().unwrap_or(vec![0; cells]);
            px.extend(out.map.fused);
            plab.extend(mask.iter().map(|&m| m != 0));
        }
        let ia = auroc(&ScoredSet::new(img, lab).unwrap()).unwrap();
        let pa = auroc(&ScoredSet::new(px, plab).unwrap()).unwrap();
        eprintln!("seed {seed}: image {ia:.4} pixel {pa:.4} acc {correct}/{} train {trained:?}", refs.len());
        assert!(ia >= 0.95 && pa >= 0.90 && correct == refs.len());
    }
}

