from datetime import datetime

from sqlalchemy import Boolean, DateTime, Integer, LargeBinary, String, func
from sqlalchemy.orm import Mapped, mapped_column

from .database import Base


class License(Base):
    """One attested enclave known to the vendor. K_U is never stored; it is re-derived from (pk, nonce)."""

    __tablename__ = "licenses"

    enclave_pk: Mapped[str] = mapped_column(String(64), primary_key=True)  # hex
    enclave_cert: Mapped[bytes] = mapped_column(LargeBinary)
    measurement: Mapped[str] = mapped_column(String(64))
    authorized: Mapped[bool] = mapped_column(Boolean, default=True)
    current_nonce: Mapped[bytes] = mapped_column(LargeBinary(16))
    model_version: Mapped[int] = mapped_column(Integer)
    provisioned_version: Mapped[int] = mapped_column(Integer, default=0)  # 0: never provisioned
    created_at: Mapped[datetime] = mapped_column(DateTime, server_default=func.now())
    updated_at: Mapped[datetime] = mapped_column(DateTime, server_default=func.now(), onupdate=func.now())
