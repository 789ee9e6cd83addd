use rand::Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Buffers (batch-norm running statistics) are stored but not trained.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat, ordered list of named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name,
            shape,
            data,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: String, shape: Vec<usize>, trainable: bool) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n], trainable)
    }

    pub fn filled(&mut self, name: String, shape: Vec<usize>, value: f32, trainable: bool) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n], trainable)
    }

    /// He-uniform: `U(-√(6/fan_in), √(6/fan_in))`.
    pub fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, shape, data, true)
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    /// Zeroed gradient buffers, one per parameter (empty for buffers).
    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        vec![0.0; p.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub values: Vec<Vec<f32>>,
}

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.values[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }
}
