#pragma once

// Umbrella header.
#include "diffolio/characteristics.hpp"
#include "diffolio/checkpoint.hpp"
#include "diffolio/config.hpp"
#include "diffolio/data_panel.hpp"
#include "diffolio/dataset.hpp"
#include "diffolio/denoiser.hpp"
#include "diffolio/diffusion.hpp"
#include "diffolio/ensemble.hpp"
#include "diffolio/guidance.hpp"
#include "diffolio/pipeline.hpp"
#include "diffolio/plot_svg.hpp"
#include "diffolio/portfolio.hpp"
#include "diffolio/sampler.hpp"
#include "diffolio/scoring.hpp"
#include "diffolio/trainer.hpp"
