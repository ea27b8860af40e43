//! AP on a toy ranking, then forgetting metrics against an upper bound.

use std::collections::BTreeSet;

use cod_mining::bbox::BBox;
use cod_mining::metrics::{
    average_precision, omega, rpd, rsd, ClassAPTable, Interpolation, IouSpec, ScoredBox,
};

fn main() -> cod_mining::Result<()> {
    let gts: Vec<(usize, BBox)> = vec![
        (0, BBox::new(0.0, 0.0, 10.0, 10.0)),
        (0, BBox::new(20.0, 20.0, 30.0, 30.0)),
        (1, BBox::new(5.0, 5.0, 15.0, 15.0)),
    ];
    let dets = vec![
        ScoredBox { image: 0, bbox: BBox::new(0.0, 0.0, 10.0, 11.0), score: 0.9 },
        ScoredBox { image: 1, bbox: BBox::new(40.0, 40.0, 50.0, 50.0), score: 0.8 },
        ScoredBox { image: 1, bbox: BBox::new(5.0, 5.0, 15.0, 15.0), score: 0.7 },
    ];
    for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
        let r = average_precision(&dets, &gts, 0.5, interp);
        println!("{interp:?} AP = {:.4}, curve {:?}", r.ap, r.curve);
    }

    let joint = ClassAPTable::from_percent([(0, 80.0), (1, 70.0), (2, 60.0), (3, 75.0)], IouSpec::Fixed50);
    let inc = ClassAPTable::from_percent([(0, 40.0), (1, 63.0), (2, 30.0), (3, 70.0)], IouSpec::Fixed50);
    let old: BTreeSet<usize> = [0, 1, 2].into();
    let new: BTreeSet<usize> = [3].into();
    println!("RSD {:.2}  RPD {:.2}", rsd(&joint, &inc, &old)?, rpd(&joint, &inc, &new)?);
    println!("omega {:.2}", omega(inc.map(), joint.map())?);
    Ok(())
}
