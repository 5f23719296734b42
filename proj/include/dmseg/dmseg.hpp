#pragma once

#include "dmseg/checkpoint.hpp"
#include "dmseg/config.hpp"
#include "dmseg/data.hpp"
#include "dmseg/metrics.hpp"
#include "dmseg/nifti.hpp"
#include "dmseg/phantom.hpp"
#include "dmseg/ssm_reference.hpp"
#include "dmseg/trainer.hpp"
