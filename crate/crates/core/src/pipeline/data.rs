use crate::numerics::Tensor;

/// Feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        (gather_rows(&self.x, ids), ids.iter().map(|&i| self.y[i]).collect())
    }
}

/// Everything the trainer may look at: labeled sources and unlabeled target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub sources: Vec<LabeledSet>,
    pub target_x: Tensor,
    pub classes: usize,
}

impl TrainData {
    pub fn input_dim(&self) -> usize {
        self.target_x.cols()
    }
}

pub fn gather_rows(x: &Tensor, ids: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &i in ids {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(ids.len(), c, data)
}
