//! Phoneme-boundary key frames versus uniform and offset index sets, and a
//! TextGrid converted into an alignment.

use std::collections::HashMap;

use kmtalk::audio::{locate_key_frames, offset_indices, textgrid_to_alignment, uniform_sample_indices};

const TEXTGRID: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 0.62
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 0.62
        intervals: size = 5
        intervals [1]:
            xmin = 0
            xmax = 0.1
            text = "sil"
        intervals [2]:
            xmin = 0.1
            xmax = 0.22
            text = "HH"
        intervals [3]:
            xmin = 0.22
            xmax = 0.36
            text = "AH"
        intervals [4]:
            xmin = 0.36
            xmax = 0.5
            text = "L"
        intervals [5]:
            xmin = 0.5
            xmax = 0.62
            text = "OW"
"#;

fn main() -> kmtalk::Result<()> {
    let vocab: HashMap<String, usize> = ["HH", "AH", "L", "OW"].iter().enumerate().map(|(i, s)| (s.to_string(), i + 1)).collect();
    let alignment = textgrid_to_alignment(TEXTGRID, "phones", &vocab)?;
    for p in &alignment.phones {
        println!("{:>3} {:.2}-{:.2}", p.label, p.start, p.end);
    }
    println!("tokens {:?}", alignment.tokens);

    let fps = 25.0;
    let n = (alignment.duration * fps).round() as usize;
    let keys = locate_key_frames(&alignment, fps, n)?;
    println!("N = {n}");
    println!("phoneme keys   {keys:?}");
    println!("uniform:3      {:?}", uniform_sample_indices(n, 3)?);
    println!("phoneme+1      {:?}", offset_indices(&keys, 1, n));
    println!("keys at 60 fps {:?}", locate_key_frames(&alignment, 60.0, (alignment.duration * 60.0).round() as usize)?);
    Ok(())
}
