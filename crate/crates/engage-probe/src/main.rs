use engage_core::agents::ToyPolicy;
use engage_core::dialogue::Turn;
use engage_core::preference::RewardModel;

fn main() {
    let mode = std::env::args().nth(1).unwrap();
    let path = std::env::args().nth(2).unwrap();
    let policy = ToyPolicy::support_default();
    let vocab = policy.vocabulary();
    let phrasings = ["Honestly, {} keeps me up at night.", "I can't stop thinking about {} lately.", "Everything around {} has been weighing on me."];
    if mode == "rm" {
        let rm: RewardModel = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let mut correct = 0; let mut total = 0;
        for topic in ["work", "sleep", "family", "health", "money", "studies"] {
            for ph in phrasings {
                let ctx = vec![Turn::user(ph.replace("{}", topic)).unwrap()];
                let mut best = 0; let mut best_s = f64::NEG_INFINITY;
                for (i, r) in vocab.iter().enumerate() {
                    let s = rm.score(&ctx, r);
                    if s > best_s { best_s = s; best = i; }
                }
                total += 1;
                let ok = vocab[best].contains(topic);
                if ok { correct += 1; }
                println!("{topic:8} {:30} -> {}", &ph[..20], &vocab[best][..45.min(vocab[best].len())]);
            }
        }
        println!("RM top-1 correct: {correct}/{total}");
    } else {
        let policy: ToyPolicy = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let mut correct = 0; let mut total = 0;
        for topic in ["work", "sleep", "family", "health", "money", "studies"] {
            for ph in phrasings {
                let ctx = vec![Turn::user(ph.replace("{}", topic)).unwrap()];
                let lps = policy.log_probs(&ctx);
                let best = (0..lps.len()).max_by(|&a, &b| lps[a].partial_cmp(&lps[b]).unwrap()).unwrap();
                total += 1;
                if vocab[best].contains(topic) { correct += 1; }
                println!("{topic:8} {:22} P={:.2} -> {}", &ph[..20], lps[best].exp(), &vocab[best][..45.min(vocab[best].len())]);
            }
        }
        println!("policy top-1 correct: {correct}/{total}");
    }
}
