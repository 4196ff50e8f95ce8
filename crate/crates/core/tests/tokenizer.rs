use std::sync::OnceLock;

use proptest::prelude::*;
use topicswitch_core::dialogue_graph::{Role, Utterance};
use topicswitch_core::tokenizer::*;

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let corpus = [
            "the cake is a lie",
            "こんにちは、元気ですか",
            "今日はいい天気ですね",
            "naïve café über straße",
            "emoji 🎉🎉 party 🎂",
            "the bagel and the fig",
        ];
        train_bpe(corpus.iter().cycle().take(60), 400, 5).unwrap()
    })
}

fn multibyte() -> impl Strategy<Value = String> {
    prop_oneof![
        any::<String>(),
        "[a-z ]{0,40}",
        "[ぁ-ゖ一-龯 ]{0,20}",
        "[\u{1F300}-\u{1F64F}a-c]{0,12}",
        prop::collection::vec(any::<char>(), 0..30).prop_map(|c| c.into_iter().collect()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(s in multibyte()) {
        let ids = vocab().encode_text(&s);
        prop_assert!(ids.iter().all(|&id| !vocab().is_special(id)));
        prop_assert_eq!(vocab().decode(&ids).unwrap(), s);
    }
}

proptest! {
    #[test]
    fn truncation_keeps_the_newest_turn(turns in prop::collection::vec("[a-z]{1,12}", 1..8), budget in 1usize..40) {
        let dialogue: Vec<Utterance> = turns
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance::new(if i % 2 == 0 { Role::A } else { Role::B }, t.clone()))
            .collect();
        let v = Vocab::bytes_only(2);
        let seq = v.encode_with(&dialogue, EncodeOptions { eos_after_each: true, max_len: Some(budget), max_turns: None });
        prop_assert!(seq.len() <= budget);
        let last = turns.last().unwrap();
        if last.len() < budget {
            // the newest utterance survives whole, followed by its <eos>
            let tail: Vec<u32> = seq.token_ids[seq.len() - last.len() - 1..].to_vec();
            let mut want = v.encode_text(last);
            want.push(EOS);
            prop_assert_eq!(tail, want);
        }
        // whole turns only: every kept turn but possibly a clipped single one ends with <eos>
        prop_assert_eq!(seq.token_ids.last().copied(), Some(EOS));
        prop_assert!(seq.position_ids.iter().enumerate().all(|(i, &p)| p as usize == i));
    }
}

#[test]
fn manifest_round_trip() {
    let v = vocab();
    let text = v.to_manifest();
    assert!(text.starts_with(&format!("bpe-v1 {}\n", v.len())));
    assert!(text.contains("\n#merges\n"));
    let back = Vocab::from_manifest(&text).unwrap();
    assert_eq!(&back, v);
    let s = "the cake 今日は 🎉";
    assert_eq!(back.encode_text(s), v.encode_text(s));
}

#[test]
fn merges_shorten_frequent_text() {
    let v = vocab();
    assert!(v.len() > v.special_count() + 256);
    assert!(v.encode_text("the cake").len() < "the cake".len());
    assert!(v.encode_text("今日は").len() < "今日は".len());
}

#[test]
fn corrupt_manifests_are_rejected() {
    assert!(Vocab::from_manifest("").is_err());
    assert!(Vocab::from_manifest("bpe-v2 10\n").is_err());
    let good = Vocab::bytes_only(1).to_manifest();
    let wrong_count = good.replacen("bpe-v1 262", "bpe-v1 999", 1);
    assert!(Vocab::from_manifest(&wrong_count).is_err());
}

#[test]
fn latent_tokens_are_reserved() {
    let v = vocab();
    assert_eq!(v.latent_count(), 5);
    for z in 0..5 {
        let id = v.latent_token(z);
        assert_eq!(id, FIRST_LATENT + z as u32);
        assert!(v.is_special(id));
        assert_eq!(v.decode(&[id]).unwrap(), "");
    }
    assert!(v.decode(&[v.len() as u32]).is_err());
}

#[test]
fn training_is_deterministic() {
    let corpus = ["abab abab", "cdcd ab"];
    let a = train_bpe(corpus.iter(), 300, 2).unwrap();
    let b = train_bpe(corpus.iter(), 300, 2).unwrap();
    assert_eq!(a, b);
}
