//! Synthetic brain-like phantoms: generate, split, write to disk and read
//! back.
//!
//! Run with `cargo run --example phantom_corpus [out_dir]`.

use bvae::data::{generate_corpus, make_splits, read_corpus, write_corpus, CorpusSpec, Image, Label, SplitConfig};

fn ascii(img: &Image) -> String {
    let ramp = b" .:-=+*#%@";
    let mut s = String::new();
    for y in (0..img.height).step_by(2) {
        for x in 0..img.width {
            let v = img.pixels[y * img.width + x].clamp(0.0, 1.0);
            s.push(ramp[(v * 9.0).round() as usize] as char);
        }
        s.push('\n');
    }
    s
}

fn main() -> bvae::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantom_corpus".into());
    let records = generate_corpus(&CorpusSpec::new(120, 40, 32, 7))?;
    let abnormal = records.iter().find(|r| r.label == Label::Abnormal).expect("abnormal slices requested");
    let normal = records.iter().find(|r| r.label == Label::Normal).expect("normal slices requested");
    println!("normal {}:\n{}", normal.id, ascii(&normal.image));
    let lesion = abnormal.mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v == 1).count());
    println!("abnormal {} ({lesion} lesion pixels):\n{}", abnormal.id, ascii(&abnormal.image));

    let splits = make_splits(&records, &SplitConfig { test_per_class: 10, ..SplitConfig::default() })?;
    println!("train {} / val {} / test {}", splits.train.len(), splits.val.len(), splits.test.len());

    write_corpus(out.as_ref(), &records)?;
    let back = read_corpus(out.as_ref())?;
    assert_eq!(back, records);
    println!("wrote and re-read {} slices under {out}", back.len());
    Ok(())
}
