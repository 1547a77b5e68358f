# modules/results.py
import json

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import streamlit as st

from modules.annotate import AnnotationSet
from modules.errors import FactoryError
from modules.evalmetrics import distance_table, evaluate, load_ground_truth, load_predictions, parse_features, split_half
from modules.global_css import GLOBAL_CSS

st.markdown(f"<style>{GLOBAL_CSS}</style>", unsafe_allow_html=True)


def pr_figure(report):
    fig, ax = plt.subplots(figsize=(4, 3.3))
    recall = np.asarray(report.pr_curve["recall"])
    precision = np.asarray(report.pr_curve["precision"])
    ax.plot(recall, precision, color="#1f77b4", linewidth=2)
    ax.fill_between(recall, precision, alpha=0.2, color="#1f77b4")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR @ IoU 0.50 (AP50 {report.ap50:.3f})")
    fig.tight_layout()
    return fig


def _segmentation_tab(workspace):
    col_gt, col_pred = st.columns(2)
    with col_gt:
        gt_file = st.file_uploader("Ground truth (COCO)", type=["json"], key="eval_gt")
    with col_pred:
        pred_file = st.file_uploader("Predictions (COCO results)", type=["json"], key="eval_pred")

    use_loaded = workspace.has_annotations() and gt_file is None
    if use_loaded:
        st.caption(f"Ground truth: {workspace.annotations_source} (loaded on the Dataset page)")

    if st.button("Evaluate"):
        if pred_file is None or (gt_file is None and not use_loaded):
            st.error("Both ground truth and predictions are required")
        else:
            try:
                aset = workspace.annotations if use_loaded else AnnotationSet.from_dict(json.loads(gt_file.getvalue()))
                preds = load_predictions(json.loads(pred_file.getvalue()))
                workspace.report = evaluate(preds, load_ground_truth(aset), workspace.config.eval_config(),
                                            image_ids=[img["id"] for img in aset.images])
                st.success("Evaluation finished")
            except (json.JSONDecodeError, KeyError, FactoryError) as e:
                st.error(f"Evaluation failed: {e}")

    if not workspace.has_report():
        return

    report = workspace.report
    cols = st.columns(5)
    for col, (name, value) in zip(cols, [("AP", report.ap), ("AP50", report.ap50), ("AR", report.ar),
                                         ("F1", report.f1), ("mIoU", report.miou)]):
        col.metric(name, f"{value:.3f}")
    if not report.miou_defined:
        st.warning("No true positives: mIoU is undefined and shown as 0")

    col_plot, col_table = st.columns(2)
    with col_plot:
        fig = pr_figure(report)
        st.pyplot(fig)
        plt.close(fig)
    with col_table:
        st.dataframe(report.to_frame(), use_container_width=True)
        st.download_button("Download report", json.dumps(report.to_dict(), indent=2),
                           file_name="eval.json", mime="application/json")


def _distance_tab(workspace):
    metrics = workspace.config.metrics
    reference = st.file_uploader("Reference features", type=["feat", "bin", "csv"], key="feat_ref")
    candidates = st.file_uploader("Candidate features", type=["feat", "bin", "csv"],
                                  accept_multiple_files=True, key="feat_candidates")
    same = st.checkbox("Add split-half baseline (SAME)", value=True)

    if st.button("Compute distances"):
        if reference is None:
            st.error("Upload a reference feature file")
        else:
            try:
                ref = parse_features(reference.getvalue(), reference.name)
                tables = []
                if same:
                    first, second = split_half(ref, metrics.kid_seed)
                    tables.append(distance_table(first, {"SAME": second}, metrics.kid_subset_size,
                                                 metrics.kid_subsets, metrics.kid_seed))
                named = {c.name: parse_features(c.getvalue(), c.name) for c in candidates or []}
                if named:
                    tables.append(distance_table(ref, named, metrics.kid_subset_size,
                                                 metrics.kid_subsets, metrics.kid_seed))
                if tables:
                    workspace.distances = pd.concat(tables, ignore_index=True)
                    st.success("Distances computed")
                else:
                    st.warning("Nothing to compare")
            except FactoryError as e:
                st.error(str(e))

    if workspace.distances is not None:
        st.dataframe(workspace.distances.style.format({"fid": "{:.2f}", "kid_mean": "{:.4f}", "kid_std": "{:.4f}"}),
                     use_container_width=True)
        st.download_button("Download table", workspace.distances.to_csv(index=False),
                           file_name="distance.csv", mime="text/csv")


def show(workspace):
    st.header("Evaluation")
    if workspace is None:
        st.warning("Create a workspace first")
        return
    tab_seg, tab_dist = st.tabs(["Segmentation", "Realism (FID / KID)"])
    with tab_seg:
        _segmentation_tab(workspace)
    with tab_dist:
        _distance_tab(workspace)
