#pragma once

namespace difftraj::cfg {

// geometry
inline constexpr int kImageSize = 64;
inline constexpr int kKWay = 16;
inline constexpr int kBottomThirdStart = 43;  // rows 43..63
inline constexpr int kTopThirdEnd = 20;       // rows 0..20

// diffusion
inline constexpr int kTSteps = 100;
inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 2e-2;
inline constexpr double kRasterSigma = 1.5;

// loss weights
inline constexpr double kLambdaDepth = 0.1;
inline constexpr double kLambdaTrav = 0.5;
inline constexpr double kLambdaAttn = 0.3;

// goal hierarchy and planning
inline constexpr double kTauObj = 0.5;
inline constexpr double kCostWTrav = 50.0;
inline constexpr double kCostWAttn = 2.0;
inline constexpr double kCostBlurSigma = 3.0;
inline constexpr double kGoalProjRadiusPx = 6.0;
inline constexpr double kTravFloor = 0.5;  // hard planning constraint
inline constexpr double kStartTravMin = 0.9;

// supervision
inline constexpr double kAttnSigmaGoalPx = 4.0;
inline constexpr double kAttnSigmaGraspPx = 1.0;
inline constexpr double kDepthNearM = 0.5;
inline constexpr double kDepthFarM = 8.0;
inline constexpr double kTableDepthCm = 60.0;
inline constexpr double kObjDepthMinCm = 10.0;
inline constexpr double kObjDepthMaxCm = 50.0;

// model
inline constexpr int kInChannels = 5;
inline constexpr int kBaseChannels = 32;
inline constexpr int kContextDim = 64;
inline constexpr int kModeEmbDim = 16;
inline constexpr int kScaleEmbDim = 16;
inline constexpr int kAttnEncDim = 32;
inline constexpr int kTimeEmbDim = 64;

// training defaults
inline constexpr int kEpochs = 50;
inline constexpr int kBatchSize = 32;
inline constexpr double kLearningRate = 1e-4;
inline constexpr double kGradClipNorm = 1.0;
inline constexpr int kFinetuneEpochs = 10;

// evaluation
inline constexpr double kHfovDeg = 90.0;
inline constexpr double kNavSuccessM = 0.5;
inline constexpr double kGraspSuccessCm = 10.0;  // harness constant
inline constexpr double kCompliancePx = 8.0;

}  // namespace difftraj::cfg
