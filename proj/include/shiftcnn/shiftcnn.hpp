#pragma once

#include "shiftcnn/analyzer.hpp"
#include "shiftcnn/codebook.hpp"
#include "shiftcnn/engine.hpp"
#include "shiftcnn/error.hpp"
#include "shiftcnn/io.hpp"
#include "shiftcnn/synthetic.hpp"
#include "shiftcnn/tensor.hpp"
