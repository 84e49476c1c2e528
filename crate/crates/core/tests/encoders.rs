use safa::encoders::{patchify, EncoderConfig, ImageEncoder, ImageSample, TextEncoder, TextSample, OOV_ID, PAD_ID};
use safa::numeric::{ParamStore, Rng, Tape, Tensor};
use safa::Error;

fn desk() -> EncoderConfig {
    EncoderConfig {
        d: 32,
        layers: 2,
        attn_heads: 4,
        patch_size: 8,
        image_height: 32,
        image_width: 32,
        channels: 3,
        max_len: 100,
        vocab_size: 50,
        ..EncoderConfig::default()
    }
}

struct Encoders {
    store: ParamStore<f64>,
    image: ImageEncoder,
    text: TextEncoder,
}

fn build(cfg: &EncoderConfig, seed: u64) -> Encoders {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let image = ImageEncoder::new(&mut store, &mut rng, cfg).unwrap();
    let text = TextEncoder::new(&mut store, &mut rng, cfg).unwrap();
    Encoders { store, image, text }
}

fn image(seed: u64, cfg: &EncoderConfig) -> ImageSample {
    ImageSample {
        pixels: Rng::new(seed).uniform_tensor(&[cfg.image_height, cfg.image_width, cfg.channels], 0.0, 1.0),
        identity: 0,
    }
}

fn text(tokens: &[usize], length: usize) -> TextSample {
    TextSample {
        tokens: tokens.to_vec(),
        length,
        identity: 0,
    }
}

fn encode_images(enc: &Encoders, images: &[ImageSample]) -> Vec<Tensor<f64>> {
    let tape = Tape::new();
    let vars = tape.bind_all(&enc.store);
    let out = enc.image.encode(&tape, &vars, images, None).unwrap();
    out.iter().map(|s| s.features.to_tensor()).collect()
}

fn encode_texts(enc: &Encoders, texts: &[TextSample]) -> Vec<(Tensor<f64>, Vec<bool>)> {
    let tape = Tape::new();
    let vars = tape.bind_all(&enc.store);
    let out = enc.text.encode(&vars, texts, None).unwrap();
    out.iter().map(|s| (s.features.to_tensor(), s.mask.clone())).collect()
}

#[test]
fn output_shapes() {
    let cfg = desk();
    let enc = build(&cfg, 0);
    let imgs = encode_images(&enc, &[image(1, &cfg), image(2, &cfg)]);
    assert_eq!(imgs.len(), 2);
    for f in &imgs {
        assert_eq!(f.shape(), &[17, 32]);
    }
    let txts = encode_texts(&enc, &[text(&[3, 4, 5], 3), text(&[7; 100], 100)]);
    for (f, _) in &txts {
        assert_eq!(f.shape(), &[101, 32]);
    }
    let valid: Vec<usize> = txts.iter().map(|(_, m)| m.iter().filter(|&&b| b).count()).collect();
    assert_eq!(valid, vec![4, 101]);
    assert!(txts[0].1[..4].iter().all(|&b| b));
}

#[test]
fn padding_never_changes_valid_rows() {
    let cfg = EncoderConfig { max_len: 12, ..desk() };
    let enc = build(&cfg, 3);
    let short = text(&[5, 9, 2, 11], 4);
    let padded = text(&[5, 9, 2, 11, PAD_ID, PAD_ID, PAD_ID], 4);
    let junk = text(&[5, 9, 2, 11, 40, 13, 7, 7, 30], 4);
    let out = encode_texts(&enc, &[short, padded, junk]);
    for other in &out[1..] {
        for r in 0..=4 {
            for (a, b) in out[0].0.row(r).iter().zip(other.0.row(r)) {
                assert!((a - b).abs() < 1e-6, "row {r}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn one_patch_changes_its_own_embedding_row_only() {
    let cfg = desk();
    let enc = build(&cfg, 5);
    let a = image(11, &cfg);
    let mut b = a.clone();
    // patch index 5 is grid row 1, column 1: pixels [8, 16) × [8, 16)
    for y in 8..16 {
        for x in 8..16 {
            for c in 0..3 {
                let i = (y * 32 + x) * 3 + c;
                b.pixels.data_mut()[i] = 1.0 - b.pixels.data()[i];
            }
        }
    }
    let pa = patchify(&a.pixels, 8).unwrap();
    let pb = patchify(&b.pixels, 8).unwrap();
    let changed: Vec<usize> = (0..16).filter(|&p| pa.row(p) != pb.row(p)).collect();
    assert_eq!(changed, vec![5]);

    let tape = Tape::new();
    let vars = tape.bind_all(&enc.store);
    let ea = enc.image.embed(&tape, &vars, &a).unwrap().to_tensor();
    let eb = enc.image.embed(&tape, &vars, &b).unwrap().to_tensor();
    for r in 0..17 {
        if r == 6 {
            assert_ne!(ea.row(r), eb.row(r));
        } else {
            assert_eq!(ea.row(r), eb.row(r), "row {r}");
        }
    }
    let fa = enc.image.encode_one(&tape, &vars, &a, None).unwrap().features.to_tensor();
    let fb = enc.image.encode_one(&tape, &vars, &b, None).unwrap().features.to_tensor();
    assert_ne!(fa.row(0), fb.row(0));
}

#[test]
fn same_seed_same_weights() {
    let cfg = desk();
    let bits = |seed| {
        build(&cfg, seed)
            .store
            .iter()
            .flat_map(|p| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(8), bits(8));
    assert_ne!(bits(8), bits(9));
}

#[test]
fn batch_order_permutes_outputs() {
    let cfg = EncoderConfig { max_len: 6, ..desk() };
    let enc = build(&cfg, 2);
    let (a, b, c) = (image(1, &cfg), image(2, &cfg), image(3, &cfg));
    let fwd = encode_images(&enc, &[a.clone(), b.clone(), c.clone()]);
    let rev = encode_images(&enc, &[c, a, b]);
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[2]);
    assert_eq!(fwd[2], rev[0]);

    let (s, t) = (text(&[4, 5], 2), text(&[9, 8, 7, 6], 4));
    let fwd = encode_texts(&enc, &[s.clone(), t.clone()]);
    let rev = encode_texts(&enc, &[t, s]);
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[0]);
}

#[test]
fn oov_text_is_finite_and_bad_ids_fail() {
    let cfg = EncoderConfig { max_len: 6, ..desk() };
    let enc = build(&cfg, 4);
    let out = encode_texts(&enc, &[text(&[OOV_ID, OOV_ID, OOV_ID], 3)]);
    assert!(out[0].0.is_finite());

    let tape = Tape::new();
    let vars = tape.bind_all(&enc.store);
    let err = enc.text.encode(&vars, &[text(&[3, 50], 2)], None).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    let err = enc.text.encode(&vars, &[text(&[3; 7], 7)], None).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn wrong_image_shape_is_rejected() {
    let cfg = desk();
    let enc = build(&cfg, 0);
    let small = ImageSample {
        pixels: Tensor::zeros(&[16, 16, 3]),
        identity: 0,
    };
    let tape = Tape::new();
    let vars = tape.bind_all(&enc.store);
    assert!(matches!(
        enc.image.encode(&tape, &vars, &[small], None),
        Err(Error::Shape(_))
    ));
}
