//! Score a few answers with the text metrics and a few regions with the
//! two IoU measures.

use avsd::data::TimeRegion;
use avsd::metrics::{bleu4, cider_d, coco_tokenize, iou1, iou2, rouge_l};

fn main() -> avsd::Result<()> {
    let pairs = [
        ("A man is opening the door.", vec!["a man opens the door", "someone is opening a door"]),
        ("She's holding a red cup", vec!["she is holding a red cup"]),
        ("the dog sleeps", vec!["a cat is sitting on the sofa"]),
    ];
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| coco_tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = pairs
        .iter()
        .map(|(_, r)| r.iter().map(|s| coco_tokenize(s)).collect())
        .collect();
    println!("tokens: {:?}", cands[1]);
    println!("BLEU4 {:.4}  ROUGE_L {:.4}  CIDEr-D {:.4}", bleu4(&cands, &refs)?, rouge_l(&cands, &refs)?, cider_d(&cands, &refs)?);

    let gt = [TimeRegion::new(2.0, 5.0), TimeRegion::new(7.0, 8.0)];
    let pred = [TimeRegion::new(2.5, 5.5)];
    println!("IoU-1 {:.4}  IoU-2 {:.4}", iou1(&pred, &gt), iou2(&pred, &gt, 0.5));
    Ok(())
}
