use speechsent::model::AttentionMap;
use speechsent::synthcorpus::Word;
use speechsent::visualize::{
    html_page, quantize_bins, render, word_attention, words_to_frames, HeadSelect, RenderFormat, TimedWord,
};

const TOKENS: [&str; 6] = ["the", "movie", "was", "<truly>", "awful", "today"];
const WORD_WEIGHTS: [f64; 6] = [0.05, 0.10, 0.15, 0.20, 0.40, 0.10];

/// Two frames per word; the heads disagree frame by frame but share the mean.
fn six_word_input() -> (AttentionMap, Vec<Word>) {
    let mean: Vec<f64> = WORD_WEIGHTS.iter().flat_map(|&w| [w / 2.0, w / 2.0]).collect();
    let wiggle = |t: usize| if t.is_multiple_of(2) { 0.01 } else { -0.01 };
    let h0 = mean.iter().enumerate().map(|(t, m)| m + wiggle(t)).collect();
    let h1 = mean.iter().enumerate().map(|(t, m)| m - wiggle(t)).collect();
    let words = TOKENS
        .iter()
        .enumerate()
        .map(|(i, tok)| Word {
            token: tok.to_string(),
            start: 2 * i,
            end: 2 * i + 2,
        })
        .collect();
    (
        AttentionMap {
            weights: vec![h0, h1],
            frame_period: 0.08,
        },
        words,
    )
}

fn golden(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .trim_end_matches('\n')
        .to_string()
}

#[test]
fn six_word_heatmap_matches_golden_files() {
    let (map, words) = six_word_input();
    let weights = word_attention(&map, &words, HeadSelect::Mean).unwrap();
    for (w, expect) in weights.iter().zip(WORD_WEIGHTS) {
        assert!((w - expect / 2.0).abs() < 1e-12);
    }
    let bins = quantize_bins(&weights);
    assert_eq!(bins, [0, 0, 1, 2, 2, 0]);
    assert_eq!(
        render(&TOKENS, &bins, RenderFormat::Ansi).unwrap(),
        golden("six_words.ansi")
    );
    assert_eq!(
        render(&TOKENS, &bins, RenderFormat::Html).unwrap(),
        golden("six_words.html")
    );
}

#[test]
fn single_head_selection_uses_that_head() {
    let (map, words) = six_word_input();
    let h0 = word_attention(&map, &words, HeadSelect::Head(0)).unwrap();
    // each word spans one even and one odd frame, so the wiggle cancels
    for (w, expect) in h0.iter().zip(WORD_WEIGHTS) {
        assert!((w - expect / 2.0).abs() < 1e-12);
    }
    assert!(word_attention(&map, &words, HeadSelect::Head(2)).is_err());
}

#[test]
fn bins_match_a_sorting_oracle() {
    let cases: [&[f64]; 4] = [
        &[0.3],
        &[1.0, 1.0, 1.0],
        &[0.1, 0.9, 0.5, 0.5, 0.2, 0.7, 0.3],
        &[3.0, 2.0, 1.0, 0.0],
    ];
    for w in cases {
        let mut sorted = w.to_vec();
        sorted.sort_by(f64::total_cmp);
        let expect: Vec<u8> = w
            .iter()
            .map(|x| {
                let r = sorted.partition_point(|v| v < x);
                ((3 * r) / w.len()).min(2) as u8
            })
            .collect();
        assert_eq!(quantize_bins(w), expect);
    }
}

#[test]
fn alignment_errors_are_reported() {
    let (map, mut words) = six_word_input();
    words[5].end = 13;
    assert!(word_attention(&map, &words, HeadSelect::Mean).is_err());
    let (_, mut words) = six_word_input();
    words[2].start = 3;
    assert!(word_attention(&map, &words, HeadSelect::Mean).is_err());
    let (_, mut words) = six_word_input();
    words[1].end = words[1].start;
    let w = word_attention(&map, &words, HeadSelect::Mean).unwrap();
    assert_eq!(w[1], 0.0);
}

#[test]
fn word_times_round_to_frames() {
    let timed = [
        TimedWord {
            token: "a".into(),
            start: 0.0,
            end: 0.17,
        },
        TimedWord {
            token: "b".into(),
            start: 0.17,
            end: 0.41,
        },
    ];
    let words = words_to_frames(&timed, 0.08).unwrap();
    assert_eq!((words[0].start, words[0].end), (0, 2));
    assert_eq!((words[1].start, words[1].end), (2, 5));
    assert!(words_to_frames(&timed, 0.0).is_err());
}

#[test]
fn html_page_escapes_title_and_embeds_style() {
    let page = html_page("a<b", "<span class=\"att-low\">x</span>");
    assert!(page.contains("<title>a&lt;b</title>"));
    assert!(page.contains(".att-high"));
    assert!(page.contains("<span class=\"att-low\">x</span>"));
    assert!("svg".parse::<RenderFormat>().is_err());
}
