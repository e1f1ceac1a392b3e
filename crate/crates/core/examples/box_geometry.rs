//! IoU, GIoU and class-wise NMS on a handful of boxes.
//!
//!     cargo run --example box_geometry

use ssod::geometry::{giou, iou, l1_center_form, nms, BBox, Detection};

fn main() -> ssod::error::Result<()> {
    let a = BBox::new(0.1, 0.1, 0.5, 0.5)?;
    let b = BBox::new(0.3, 0.3, 0.7, 0.7)?;
    let far = BBox::new(0.8, 0.8, 0.9, 0.9)?;
    for (name, other) in [("overlapping", &b), ("disjoint", &far)] {
        println!(
            "{name:<12} iou {:.4}  giou {:+.4}  l1 {:.4}",
            iou(&a, other),
            giou(&a, other),
            l1_center_form(&a, other)
        );
    }

    let dets = vec![
        Detection::single(a, 0, 0.9, 2)?,
        Detection::single(BBox::new(0.12, 0.1, 0.5, 0.52)?, 0, 0.8, 2)?,
        // same place, other class: survives class-wise NMS
        Detection::single(BBox::new(0.12, 0.1, 0.5, 0.52)?, 1, 0.7, 2)?,
        Detection::single(far, 0, 0.3, 2)?,
    ];
    for class_wise in [true, false] {
        let kept = nms(&dets, 0.7, class_wise)?;
        let scores: Vec<String> = kept.iter().map(|d| format!("c{}:{:.1}", d.class_id(), d.score())).collect();
        println!("nms(0.7, class_wise={class_wise}) keeps {}", scores.join(" "));
    }
    Ok(())
}
